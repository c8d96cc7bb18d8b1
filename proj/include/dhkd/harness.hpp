#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhkd/collapse.hpp"
#include "dhkd/config.hpp"
#include "dhkd/data.hpp"
#include "dhkd/grad_theory.hpp"
#include "dhkd/losses.hpp"
#include "dhkd/model.hpp"
#include "dhkd/rng.hpp"

namespace dhkd::harness {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Independent RNG streams derived from the run seed.
inline constexpr std::uint64_t kStudentInitStream = 1;
inline constexpr std::uint64_t kStudentBatchStream = 2;
inline constexpr std::uint64_t kTeacherInitStream = 3;
inline constexpr std::uint64_t kTeacherBatchStream = 4;

// Collapse heuristic: accuracy below 2/K for this many consecutive epochs
// after kCollapseGraceEpochs.
inline constexpr std::size_t kCollapseRun = 3;
inline constexpr std::size_t kCollapseGraceEpochs = 5;

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  std::string setting;
  std::uint64_t seed = 0;
  double loss_ce = kNaN;
  double loss_bkl = kNaN;  // distillation loss the setting trains, NaN if none
  double acc_main = kNaN;
  double acc_aux = kNaN;
  collapse::NcMetrics nc{};
  double corr_main = kNaN;
  double corr_aux = kNaN;
  double conflict_rate = kNaN;  // NaN without an auxiliary head
  bool collapsed = false;
  double wall_ms = 0.0;
};

inline constexpr const char* kEpochCsvHeader =
    "epoch,setting,seed,loss_ce,loss_bkl,acc_main,acc_aux,nc1,nc2_angle_dev,nc2_norm_cv,nc3_duality,"
    "nc4_disagreement,corr_main,corr_aux,conflict_rate,collapsed,wall_ms";

/// Shortest round-trip decimal form, locale independent; "nan"/"inf" otherwise.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline void write_epoch_csv(std::ostream& os, const std::vector<EpochLog>& logs) {
  os << kEpochCsvHeader << '\n';
  for (const auto& l : logs) {
    os << l.epoch << ',' << l.setting << ',' << l.seed << ',' << format_double(l.loss_ce) << ','
       << format_double(l.loss_bkl) << ',' << format_double(l.acc_main) << ',' << format_double(l.acc_aux)
       << ',' << format_double(l.nc.nc1) << ',' << format_double(l.nc.nc2_angle_dev) << ','
       << format_double(l.nc.nc2_norm_cv) << ',' << format_double(l.nc.nc3_duality) << ','
       << format_double(l.nc.nc4_disagreement) << ',' << format_double(l.corr_main) << ','
       << format_double(l.corr_aux) << ',' << format_double(l.conflict_rate) << ','
       << (l.collapsed ? 1 : 0) << ',' << format_double(l.wall_ms) << '\n';
  }
}

inline std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

inline double accuracy(const Matrix& logits, std::span<const std::size_t> labels) {
  if (logits.rows() != labels.size()) throw std::invalid_argument("accuracy: label count != rows");
  if (labels.empty()) return kNaN;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += argmax_row(logits.row(i)) == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Train/test data for a config: IDX files when given, else the synthetic mixture.
inline data::Split load_data(const RunConfig& c) {
  if (c.uses_idx()) {
    data::Split s{data::load_idx(c.train_images, c.train_labels), data::load_idx(c.test_images, c.test_labels)};
    const std::size_t k = std::max(s.train.classes, s.test.classes);
    s.train.classes = s.test.classes = k;
    if (s.train.dim() != s.test.dim()) throw data::DataError("train and test IDX widths differ");
    return s;
  }
  return data::split(data::gen_gaussian_mixture(c.data), c.train_fraction, c.data.seed);
}

inline model::DualHeadNet make_teacher_net(const RunConfig& c, std::size_t input_dim, std::size_t classes) {
  Rng rng(derive_seed(c.seed, kTeacherInitStream));
  return model::make_dual_head_net(input_dim, c.teacher_widths, classes, model::AuxHeadKind::none, 0, rng);
}

/// Single-head settings get no auxiliary head, so their initial backbone and
/// main head coincide with the dual-head ones for the same seed.
inline model::DualHeadNet make_student_net(const RunConfig& c, std::size_t input_dim, std::size_t classes,
                                           Setting s) {
  Rng rng(derive_seed(c.seed, kStudentInitStream));
  const auto aux = dual_head(s) ? c.aux_head : model::AuxHeadKind::none;
  return model::make_dual_head_net(input_dim, c.student_widths, classes, aux, c.aux_hidden, rng);
}

/// What drives the gradient in one training run.
enum class Objective { ce, ce_only, bkl_only, ce_plus_bkl, dhkd, dhkd_vanilla };

inline Objective objective_of(Setting s) {
  switch (s) {
    case Setting::ce_only: return Objective::ce_only;
    case Setting::bkl_only: return Objective::bkl_only;
    case Setting::ce_plus_bkl: return Objective::ce_plus_bkl;
    case Setting::dhkd: return Objective::dhkd;
    case Setting::dhkd_vanilla: return Objective::dhkd_vanilla;
  }
  return Objective::ce;
}

struct TrainOptions {
  bool record_dots = false;  // keep every backbone g_aux . g_ce per epoch
  std::function<void(const EpochLog&)> on_epoch;
};

struct RunResult {
  model::DualHeadNet net;
  std::vector<EpochLog> logs;
  std::optional<std::size_t> collapse_epoch;
  std::vector<std::vector<double>> epoch_dots;  // [epoch-1][step * tensors + t]
  std::size_t backbone_tensors = 0;

  bool collapsed() const { return collapse_epoch.has_value(); }
  double final_acc() const { return logs.empty() ? kNaN : logs.back().acc_main; }
};

struct TrainSchedule {
  model::SgdConfig sgd;
  std::size_t epochs = 0;
  std::vector<std::size_t> milestones;
  std::uint64_t batch_seed = 0;
};

/// Teacher logits precomputed once; the teacher network is never touched.
struct TeacherLogits {
  Matrix train, test;
};

namespace train_detail {

struct StepLosses {
  double ce = kNaN;
  double kd = kNaN;
  double total = kNaN;
};

inline StepLosses step(model::DualHeadNet& net, const Matrix& xb, std::span<const std::size_t> yb,
                       const Matrix* zt, Objective obj, const RunConfig& c, model::SgdState& sgd,
                       model::AlignStats* align, bool& finite) {
  using losses::Reduction;
  auto fw = model::forward(net, xb);
  StepLosses out;
  auto all_finite = [](const Matrix& m) {
    return std::all_of(m.flat().begin(), m.flat().end(), [](double v) { return std::isfinite(v); });
  };
  if (!all_finite(fw.main_logits) || (net.aux_head && !all_finite(fw.aux_logits))) {
    finite = false;
    return out;
  }
  const auto ce = losses::ce_loss(fw.main_logits, yb, Reduction::mean);
  out.ce = ce.value;
  Matrix g_main, g_aux;
  switch (obj) {
    case Objective::ce:
    case Objective::ce_only:
      g_main = ce.grad;
      out.total = ce.value;
      break;
    case Objective::bkl_only: {
      const auto kd = losses::binary_kl_loss(fw.main_logits, *zt, c.tau, Reduction::mean);
      out.kd = kd.value;
      out.total = kd.value;
      g_main = kd.grad;
      break;
    }
    case Objective::ce_plus_bkl: {
      const auto kd = losses::binary_kl_loss(fw.main_logits, *zt, c.tau, Reduction::mean);
      out.kd = kd.value;
      out.total = ce.value + c.alpha * kd.value;
      g_main = ce.grad;
      if (c.alpha != 0.0) axpy(c.alpha, kd.grad.flat(), g_main.flat());
      break;
    }
    case Objective::dhkd:
    case Objective::dhkd_vanilla: {
      const auto kd = obj == Objective::dhkd
                          ? losses::binary_kl_norm_loss(fw.aux_logits, *zt, c.tau, Reduction::mean)
                          : losses::vanilla_kd_loss(fw.aux_logits, *zt, c.tau, Reduction::mean);
      out.kd = kd.value;
      out.total = ce.value + c.alpha * kd.value;
      g_main = ce.grad;
      g_aux = scaled(kd.grad, c.alpha);
      break;
    }
  }
  if (!std::isfinite(out.total)) {
    finite = false;
    return out;
  }
  auto bw = model::backward(net, fw.cache, g_main, g_aux);
  model::GradientBuffer g{std::move(bw.backbone_from_main), std::move(bw.main_head), std::move(bw.aux_head)};
  if (net.aux_head) {
    *align = model::align_backbone(bw.backbone_from_aux, g.backbone, c.alignment);
    model::add_into(g.backbone, bw.backbone_from_aux);
  }
  if (c.clip_norm) model::clip_global_norm(g, *c.clip_norm);
  finite = model::sgd_step(net, g, sgd);
  return out;
}

inline double corr_mean_abs(const Matrix& teacher, const Matrix& student) {
  return collapse::correlation_diff(teacher, student).mean_abs;
}

}  // namespace train_detail

/// Runs SGD over `split.train`, logging one EpochLog per epoch.
///
/// Stops at the first non-finite loss or gradient. The accuracy-based
/// collapse flag is sticky once raised but training continues.
inline RunResult run_training(model::DualHeadNet net, const data::Split& split, const RunConfig& c,
                              Objective obj, const std::string& label, const TrainSchedule& sched,
                              const TeacherLogits* teacher, const TrainOptions& opts = {}) {
  net.validate();
  const bool needs_teacher = obj != Objective::ce;
  if (needs_teacher && !teacher) throw std::invalid_argument("run_training: objective needs teacher logits");
  if ((obj == Objective::dhkd || obj == Objective::dhkd_vanilla) && !net.aux_head) {
    throw std::invalid_argument("run_training: dual-head objective needs an aux head");
  }
  const auto& train = split.train;
  const auto& test = split.test;
  if (net.input_dim() != train.dim()) throw std::invalid_argument("run_training: input width != data width");
  if (net.classes() != train.classes) throw std::invalid_argument("run_training: class count mismatch");

  RunResult res;
  model::for_each_tensor(net.backbone, [&](std::span<const double>) { ++res.backbone_tensors; });
  auto sgd = model::make_sgd_state(net, sched.sgd);
  const double chance2 = 2.0 / static_cast<double>(train.classes);
  std::size_t low_run = 0;
  bool sticky = false;
  for (std::size_t e = 0; e < sched.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    sgd.config.lr = model::step_schedule(sched.sgd.lr, sched.milestones, e);
    EpochLog log;
    log.epoch = e + 1;
    log.setting = label;
    log.seed = c.seed;
    double ce_sum = 0.0, kd_sum = 0.0;
    std::size_t seen = 0, tensors = 0, conflicts = 0;
    bool finite = true;
    std::vector<double> dots;
    for (const auto& idx : data::epoch_batches(train.size(), c.batch_size, sched.batch_seed, e)) {
      const Matrix xb = gather_rows(train.x, idx);
      std::vector<std::size_t> yb(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) yb[i] = train.y[idx[i]];
      Matrix zt;
      if (teacher && needs_teacher) zt = gather_rows(teacher->train, idx);
      model::AlignStats st;
      const auto l = train_detail::step(net, xb, yb, needs_teacher ? &zt : nullptr, obj, c, sgd, &st, finite);
      if (!finite) break;
      const auto n = static_cast<double>(idx.size());
      ce_sum += l.ce * n;
      kd_sum += l.kd * n;
      seen += idx.size();
      tensors += st.tensors;
      conflicts += st.conflicts;
      if (opts.record_dots) dots.insert(dots.end(), st.dots.begin(), st.dots.end());
    }
    model::for_each_tensor(net, [&](std::span<const double> t) {
      for (double v : t) finite = finite && std::isfinite(v);
    });
    if (!finite) {
      log.collapsed = true;
      res.collapse_epoch = log.epoch;
      res.logs.push_back(log);
      if (opts.on_epoch) opts.on_epoch(log);
      break;
    }
    log.loss_ce = ce_sum / static_cast<double>(seen);
    log.loss_bkl = obj == Objective::ce || obj == Objective::ce_only ? kNaN : kd_sum / static_cast<double>(seen);
    if (net.aux_head) {
      log.conflict_rate = tensors > 0 ? static_cast<double>(conflicts) / static_cast<double>(tensors) : 0.0;
    }
    if (opts.record_dots) res.epoch_dots.push_back(std::move(dots));

    const auto te = model::forward(net, test.x);
    log.acc_main = accuracy(te.main_logits, test.y);
    if (net.aux_head) log.acc_aux = accuracy(te.aux_logits, test.y);
    if (teacher) {
      log.corr_main = train_detail::corr_mean_abs(teacher->test, te.main_logits);
      if (net.aux_head) log.corr_aux = train_detail::corr_mean_abs(teacher->test, te.aux_logits);
    }
    const auto tr = model::forward(net, train.x);
    log.nc = collapse::nc_metrics(tr.features, train.y, net.classifier());

    if (log.epoch > kCollapseGraceEpochs && log.acc_main < chance2) {
      if (++low_run >= kCollapseRun && !sticky) {
        sticky = true;
        res.collapse_epoch = log.epoch;
      }
    } else {
      low_run = 0;
    }
    log.collapsed = sticky;
    if (c.timing) {
      log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    res.logs.push_back(log);
    if (opts.on_epoch) opts.on_epoch(log);
  }
  res.net = std::move(net);
  return res;
}

inline TrainSchedule student_schedule(const RunConfig& c) {
  return {{c.lr, c.momentum, c.weight_decay}, c.epochs, c.milestones, derive_seed(c.seed, kStudentBatchStream)};
}

inline TrainSchedule teacher_schedule(const RunConfig& c) {
  return {{c.teacher_lr, c.momentum, c.weight_decay}, c.teacher_epochs, c.teacher_milestones,
          derive_seed(c.seed, kTeacherBatchStream)};
}

/// CE training of the larger teacher network.
inline RunResult train_teacher(const RunConfig& c, const data::Split& split, const TrainOptions& opts = {}) {
  c.validate();
  auto net = make_teacher_net(c, split.train.dim(), split.train.classes);
  return run_training(std::move(net), split, c, Objective::ce, "teacher", teacher_schedule(c), nullptr, opts);
}

/// Plain CE training of the single-head student architecture, no teacher involved.
inline RunResult train_plain_ce(const RunConfig& c, const data::Split& split, const TrainOptions& opts = {}) {
  c.validate();
  auto net = make_student_net(c, split.train.dim(), split.train.classes, Setting::ce_only);
  return run_training(std::move(net), split, c, Objective::ce, "plain_ce", student_schedule(c), nullptr, opts);
}

inline TeacherLogits teacher_logits(const model::DualHeadNet& teacher, const data::Split& split) {
  teacher.validate();
  if (teacher.input_dim() != split.train.dim()) throw std::invalid_argument("teacher input width != data width");
  if (teacher.classes() != split.train.classes) {
    throw std::invalid_argument("teacher output width " + std::to_string(teacher.classes()) + " != K " +
                                std::to_string(split.train.classes));
  }
  return {model::forward(teacher, split.train.x).main_logits, model::forward(teacher, split.test.x).main_logits};
}

/// Distills a fresh student under c.setting from a frozen teacher.
inline RunResult distill(const RunConfig& c, const model::DualHeadNet& teacher, const data::Split& split,
                         const TrainOptions& opts = {}) {
  c.validate();
  const TeacherLogits tl = teacher_logits(teacher, split);
  auto net = make_student_net(c, split.train.dim(), split.train.classes, c.setting);
  return run_training(std::move(net), split, c, objective_of(c.setting), to_string(c.setting),
                      student_schedule(c), &tl, opts);
}

inline double median(std::vector<double> v) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct CompareRow {
  Setting setting{};
  std::uint64_t seed = 0;
  double teacher_acc = kNaN;
  double final_acc_main = kNaN;
  double final_acc_aux = kNaN;
  double corr_main = kNaN;
  double corr_aux = kNaN;
  std::optional<std::size_t> collapse_epoch;
};

struct CompareResult {
  std::vector<CompareRow> rows;

  double median_acc(Setting s) const {
    std::vector<double> v;
    for (const auto& r : rows)
      if (r.setting == s) v.push_back(r.final_acc_main);
    return median(v);
  }
};

struct CompareHooks {
  std::function<void(std::uint64_t seed, const RunResult&)> on_teacher;
  std::function<void(Setting, std::uint64_t seed, const RunResult&)> on_run;
};

/// Every setting under every seed; one teacher per seed shared by its settings.
inline CompareResult compare(RunConfig c, std::span<const std::uint64_t> seeds, std::span<const Setting> settings,
                             const CompareHooks& hooks = {}) {
  const data::Split split = load_data(c);
  CompareResult out;
  for (std::uint64_t seed : seeds) {
    c.seed = seed;
    const RunResult teacher = train_teacher(c, split);
    if (hooks.on_teacher) hooks.on_teacher(seed, teacher);
    for (Setting s : settings) {
      c.setting = s;
      const RunResult r = distill(c, teacher.net, split);
      if (hooks.on_run) hooks.on_run(s, seed, r);
      CompareRow row;
      row.setting = s;
      row.seed = seed;
      row.teacher_acc = teacher.final_acc();
      if (!r.logs.empty()) {
        row.final_acc_main = r.logs.back().acc_main;
        row.final_acc_aux = r.logs.back().acc_aux;
        row.corr_main = r.logs.back().corr_main;
        row.corr_aux = r.logs.back().corr_aux;
      }
      row.collapse_epoch = r.collapse_epoch;
      out.rows.push_back(row);
    }
  }
  return out;
}

inline void write_compare_csv(std::ostream& os, const CompareResult& r) {
  os << "setting,seed,teacher_acc,final_acc_main,final_acc_aux,corr_main,corr_aux,collapse_epoch\n";
  for (const auto& row : r.rows) {
    os << to_string(row.setting) << ',' << row.seed << ',' << format_double(row.teacher_acc) << ','
       << format_double(row.final_acc_main) << ',' << format_double(row.final_acc_aux) << ','
       << format_double(row.corr_main) << ',' << format_double(row.corr_aux) << ','
       << (row.collapse_epoch ? std::to_string(*row.collapse_epoch) : std::string()) << '\n';
  }
}

struct Diagnostics {
  collapse::NcMetrics nc{};
  double acc_main = kNaN;
  double acc_aux = kNaN;
  collapse::CorrelationDiff corr_main;
  std::optional<collapse::CorrelationDiff> corr_aux;
  theory::SignReport signs;
  Matrix sign_features;  // student features of the sign-report batch
};

/// NC metrics of the main head, per-head correlation gap to the teacher, and
/// the coefficient sign report over the first `batch` samples.
inline Diagnostics diagnose(const model::DualHeadNet& student, const model::DualHeadNet& teacher,
                            const data::Dataset& ds, double tau, std::size_t batch) {
  student.validate();
  teacher.validate();
  ds.validate();
  if (student.input_dim() != ds.dim() || teacher.input_dim() != ds.dim()) {
    throw std::invalid_argument("diagnose: model input width != data width " + std::to_string(ds.dim()));
  }
  if (student.classes() != teacher.classes()) {
    throw std::invalid_argument("diagnose: student K=" + std::to_string(student.classes()) +
                                " != teacher K=" + std::to_string(teacher.classes()));
  }
  if (student.classes() != ds.classes) throw std::invalid_argument("diagnose: model K != data K");
  if (batch == 0) throw std::invalid_argument("diagnose: batch must be > 0");
  Diagnostics d;
  const auto fs = model::forward(student, ds.x);
  const Matrix zt = model::forward(teacher, ds.x).main_logits;
  d.nc = collapse::nc_metrics(fs.features, ds.y, student.classifier());
  d.acc_main = accuracy(fs.main_logits, ds.y);
  d.corr_main = collapse::correlation_diff(zt, fs.main_logits);
  if (student.aux_head) {
    d.acc_aux = accuracy(fs.aux_logits, ds.y);
    d.corr_aux = collapse::correlation_diff(zt, fs.aux_logits);
  }
  std::vector<std::size_t> idx(std::min(batch, ds.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const std::vector<std::size_t> labels(ds.y.begin(), ds.y.begin() + static_cast<std::ptrdiff_t>(idx.size()));
  d.signs = theory::coefficient_sign_report(gather_rows(fs.main_logits, idx), gather_rows(zt, idx), labels, tau);
  d.sign_features = gather_rows(fs.features, idx);
  return d;
}

inline void write_diagnostics_csv(std::ostream& os, const Diagnostics& d) {
  os << "metric,value\n";
  auto row = [&](const char* name, double v) { os << name << ',' << format_double(v) << '\n'; };
  row("nc1", d.nc.nc1);
  row("nc2_angle_dev", d.nc.nc2_angle_dev);
  row("nc2_norm_cv", d.nc.nc2_norm_cv);
  row("nc3_duality", d.nc.nc3_duality);
  row("nc4_disagreement", d.nc.nc4_disagreement);
  row("acc_main", d.acc_main);
  row("acc_aux", d.acc_aux);
  row("corr_main", d.corr_main.mean_abs);
  row("corr_aux", d.corr_aux ? d.corr_aux->mean_abs : kNaN);
  row("sign_entries", static_cast<double>(d.signs.entries.size()));
  row("sign_conflicts", static_cast<double>(d.signs.conflicts));
}

}  // namespace dhkd::harness
