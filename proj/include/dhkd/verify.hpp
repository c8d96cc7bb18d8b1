#pragma once

// Property suites over losses, gradient decompositions, projection, ETF and
// the dual-head network. Each suite returns PropertyResults whose `worst` is
// the largest measured error against `limit`.
//
// FD checks report worst = rel * max|a - n| / max(abs, rel * max(|a|, |n|)),
// so worst <= rel is the same statement as "within max(abs, rel) everywhere".

#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "dhkd/collapse.hpp"
#include "dhkd/grad_theory.hpp"
#include "dhkd/losses.hpp"
#include "dhkd/matrix.hpp"
#include "dhkd/model.hpp"
#include "dhkd/numerics.hpp"
#include "dhkd/rng.hpp"

namespace dhkd::verify {

struct PropertyResult {
  std::string name;
  bool passed = false;
  double worst = 0.0;
  double limit = 0.0;
  std::size_t cases = 0;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  bool flip_bkl_grad = false;  // mutation fixture: negate the BinaryKL gradient
  std::size_t theory_instances = 50;
  std::size_t loss_instances = 100;
  std::size_t obstacle_draws = 10000;
  std::size_t projection_pairs = 100000;
  std::size_t network_instances = 10;
};

inline constexpr GradTolerance kGradTol{1e-6, 1e-5};
inline constexpr GradTolerance kNetworkTol{1e-5, 1e-4};

namespace detail {

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.flat()) v = scale * rng.normal();
  return m;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

class Tracker {
 public:
  Tracker(std::string name, double limit) { r_.name = std::move(name), r_.limit = limit; }
  void add(double err) {
    ++r_.cases;
    if (!(err <= r_.worst)) r_.worst = err;  // NaN sticks
  }
  PropertyResult done() const {
    PropertyResult r = r_;
    r.passed = r.cases > 0 && r.worst <= r.limit;
    return r;
  }

 private:
  PropertyResult r_;
};

inline double fd_error(std::span<const double> analytic, std::span<const double> numeric, GradTolerance tol) {
  return tol.rel * tolerance_ratio(analytic, numeric, tol);
}

inline bool same_bits(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a.flat()[i]) != std::bit_cast<std::uint64_t>(b.flat()[i])) return false;
  return true;
}

inline theory::TheoryBatch random_theory_batch(Rng& rng) {
  const std::size_t d = pick(rng, 1, 8), K = pick(rng, 2, 5), B = pick(rng, 1, 16);
  theory::TheoryBatch b;
  b.student_features = random_matrix(B, d, rng);
  b.teacher_features = random_matrix(B, d, rng);
  b.classifier = random_matrix(d, K, rng);
  b.labels.resize(B);
  for (auto& y : b.labels) y = rng.below(K);
  b.tau = rng.uniform(0.5, 4.0);
  b.alpha = rng.uniform(0.0, 2.0);
  return b;
}

inline std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace detail

/// Assembled decomposition gradients against central differences of the
/// summed objective. Four results: w and h for BinaryKL, w and h for BinaryKL-Norm.
inline std::vector<PropertyResult> theory_fd_suite(std::size_t instances, std::uint64_t seed) {
  using namespace detail;
  using losses::Reduction;
  Rng rng(derive_seed(seed, 11));
  Tracker w_bkl("fd_w_grad_binary_kl", kGradTol.rel), h_bkl("fd_h_grad_binary_kl", kGradTol.rel);
  Tracker w_norm("fd_w_grad_binary_kl_norm", kGradTol.rel), h_norm("fd_h_grad_binary_kl_norm", kGradTol.rel);
  for (std::size_t n = 0; n < instances; ++n) {
    const auto b = random_theory_batch(rng);
    const std::size_t d = b.dim(), K = b.classes();
    const Matrix zt_frozen = theory::teacher_logits(b);

    auto objective = [&](const Matrix& hs, const Matrix& w, bool norm_loss, bool teacher_moves) {
      const Matrix zs = matmul(hs, w);
      const Matrix zt = teacher_moves ? matmul(b.teacher_features, w) : zt_frozen;
      const double ce = losses::ce_loss(zs, b.labels, Reduction::sum).value;
      const double kd = norm_loss ? losses::binary_kl_norm_loss(zs, zt, b.tau, Reduction::sum).value
                                  : losses::binary_kl_loss(zs, zt, b.tau, Reduction::sum).value;
      return ce + b.alpha * kd;
    };

    // Classifier gradients. BinaryKL freezes the teacher logits; the obstacle
    // form differentiates w inside both logits.
    for (bool norm_loss : {false, true}) {
      const Matrix analytic = norm_loss ? theory::decompose_w_grad_norm(b).assembled_gradient(b.alpha)
                                        : theory::decompose_w_grad(b).assembled_gradient(b.alpha);
      auto f = [&](std::span<const double> flat) {
        return objective(b.student_features, Matrix(d, K, to_vec(flat)), norm_loss, norm_loss);
      };
      const auto numeric = finite_diff_grad(f, to_vec(b.classifier.flat()));
      (norm_loss ? w_norm : w_bkl).add(fd_error(analytic.flat(), numeric, kGradTol));
    }

    // Feature gradients with the teacher logits held fixed.
    for (std::size_t i = 0; i < b.batch(); ++i) {
      for (bool norm_loss : {false, true}) {
        const auto analytic = norm_loss ? theory::decompose_h_grad_norm(b, i).assembled_gradient(b.alpha)
                                        : theory::decompose_h_grad(b, i).assembled_gradient(b.alpha);
        auto f = [&](std::span<const double> h) {
          Matrix hs = b.student_features;
          std::copy(h.begin(), h.end(), hs.row(i).begin());
          return objective(hs, b.classifier, norm_loss, false);
        };
        const auto numeric = finite_diff_grad(f, to_vec(b.student_features.row(i)));
        (norm_loss ? h_norm : h_bkl).add(fd_error(analytic, numeric, kGradTol));
      }
    }
  }
  return {w_bkl.done(), h_bkl.done(), w_norm.done(), h_norm.done()};
}

/// The four losses against central differences, plus the exact zero at
/// z^S = z^T and bitwise shift invariance of BinaryKL-Norm.
inline std::vector<PropertyResult> loss_suite(std::size_t instances, std::uint64_t seed, bool flip_bkl_grad = false) {
  using namespace detail;
  using losses::LossResult;
  using losses::Reduction;
  Rng rng(derive_seed(seed, 12));
  Tracker fd_ce("fd_ce", kGradTol.rel), fd_kd("fd_vanilla_kd", kGradTol.rel);
  Tracker fd_bkl("fd_binary_kl", kGradTol.rel), fd_norm("fd_binary_kl_norm", kGradTol.rel);
  Tracker zero("zero_at_equal_logits", 0.0), shift("binary_kl_norm_shift_bitwise", 0.0);

  using Pair = std::function<LossResult(const Matrix&, const Matrix&, double, Reduction)>;
  const Pair kd = [](const Matrix& s, const Matrix& t, double tau, Reduction r) {
    return losses::vanilla_kd_loss(s, t, tau, r);
  };
  const Pair bkl = [&](const Matrix& s, const Matrix& t, double tau, Reduction r) {
    auto res = losses::binary_kl_loss(s, t, tau, r);
    if (flip_bkl_grad) res.grad = scaled(res.grad, -1.0);
    return res;
  };
  const Pair norm = [](const Matrix& s, const Matrix& t, double tau, Reduction r) {
    return losses::binary_kl_norm_loss(s, t, tau, r);
  };

  for (std::size_t n = 0; n < instances; ++n) {
    const std::size_t B = pick(rng, 1, 8), K = pick(rng, 2, 6);
    const Matrix zs = random_matrix(B, K, rng, 3.0), zt = random_matrix(B, K, rng, 3.0);
    std::vector<std::size_t> y(B);
    for (auto& v : y) v = rng.below(K);
    const double tau = rng.uniform(0.5, 4.0);
    const Reduction red = n % 2 == 0 ? Reduction::sum : Reduction::mean;

    {
      const auto a = losses::ce_loss(zs, y, red);
      auto f = [&](std::span<const double> x) { return losses::ce_loss(Matrix(B, K, to_vec(x)), y, red).value; };
      fd_ce.add(fd_error(a.grad.flat(), finite_diff_grad(f, to_vec(zs.flat())), kGradTol));
    }
    for (auto [loss, tracker] : {std::pair{&kd, &fd_kd}, std::pair{&bkl, &fd_bkl}, std::pair{&norm, &fd_norm}}) {
      const auto a = (*loss)(zs, zt, tau, red);
      auto f = [&](std::span<const double> x) { return (*loss)(Matrix(B, K, to_vec(x)), zt, tau, red).value; };
      tracker->add(fd_error(a.grad.flat(), finite_diff_grad(f, to_vec(zs.flat())), kGradTol));
    }

    for (const Pair* loss : {&bkl, &norm}) {
      const auto at = (*loss)(zt, zt, tau, red);
      double worst = std::abs(at.value);
      for (double g : at.grad.flat()) worst = std::max(worst, std::abs(g));
      zero.add(worst);
    }

    // Dyadic logits and integer shifts keep every addition exact.
    Matrix gs(B, K), gt(B, K);
    for (double& v : gs.flat()) v = static_cast<double>(static_cast<int>(rng.below(1025)) - 512) / 64.0;
    for (double& v : gt.flat()) v = static_cast<double>(static_cast<int>(rng.below(1025)) - 512) / 64.0;
    const double c = static_cast<double>(static_cast<int>(rng.below(33)) - 16);
    Matrix ss = gs, st = gt;
    for (double& v : ss.flat()) v += c;
    for (double& v : st.flat()) v += c;
    const auto base = losses::binary_kl_norm_loss(gs, gt, tau, red);
    const auto moved = losses::binary_kl_norm_loss(ss, st, tau, red);
    const bool equal = std::bit_cast<std::uint64_t>(base.value) == std::bit_cast<std::uint64_t>(moved.value) &&
                       same_bits(base.grad, moved.grad);
    shift.add(equal ? 0.0 : 1.0);
  }
  return {fd_ce.done(), fd_kd.done(), fd_bkl.done(), fd_norm.done(), zero.done(), shift.done()};
}

/// Every obstacle summand's inner product with its classifier vector.
inline PropertyResult obstacle_sign_suite(std::size_t draws, std::uint64_t seed) {
  using namespace detail;
  Rng rng(derive_seed(seed, 13));
  Tracker t("obstacle_summand_dot_w_nonpositive", 1e-12);
  for (std::size_t n = 0; n < draws; ++n) {
    auto b = random_theory_batch(rng);
    // spread magnitudes over six decades
    const double scale = std::pow(10.0, rng.uniform(-3.0, 3.0));
    for (double& v : b.teacher_features.flat()) v *= scale;
    const auto dec = theory::decompose_w_grad_norm(b);
    const Matrix wt = transpose(b.classifier);
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < b.classes(); ++k)
      for (const auto& s : dec.classes[k].summands) worst = std::max(worst, dot(s.vector(), wt.row(k)));
    t.add(worst);
  }
  return t.done();
}

/// Projection contract on random pairs, the worked example, and full opposition.
inline std::vector<PropertyResult> projection_suite(std::size_t pairs, std::uint64_t seed) {
  using namespace detail;
  Rng rng(derive_seed(seed, 14));
  Tracker contract("aligned_dot_ce_nonnegative", 1e-12);
  Tracker idempotent("aligned_idempotent", 1e-12);
  for (std::size_t n = 0; n < pairs; ++n) {
    const std::size_t len = pick(rng, 1, 1000);
    std::vector<double> a(len), c(len);
    for (double& v : a) v = rng.normal();
    for (double& v : c) v = rng.normal();
    const auto once = model::align_gradients(a, c);
    contract.add(-dot(once, c));
    if (n % 100 == 0) {
      const auto twice = model::align_gradients(once, c);
      double worst = 0.0;
      for (std::size_t i = 0; i < len; ++i) worst = std::max(worst, std::abs(twice[i] - once[i]));
      idempotent.add(worst);
    }
  }
  Tracker example("aligned_worked_example", 0.0);
  {
    const std::vector<double> a{-1.0, 1.0}, c{1.0, 0.0}, want{0.0, 1.0};
    const auto got = model::align_gradients(a, c);
    example.add(got == want ? 0.0 : 1.0);
  }
  {
    const std::vector<double> a{1.0, 1.0}, c{1.0, 0.0};
    example.add(model::align_gradients(a, c) == a ? 0.0 : 1.0);
  }
  Tracker opposed("aligned_full_opposition_zero", 0.0);
  for (std::size_t n = 0; n < 100; ++n) {
    std::vector<double> c(pick(rng, 1, 16)), a;
    for (double& v : c) v = rng.normal();
    for (double v : c) a.push_back(-v);
    double worst = 0.0;
    for (double v : model::align_gradients(a, c)) worst = std::max(worst, std::abs(v));
    opposed.add(worst);
  }
  return {contract.done(), idempotent.done(), example.done(), opposed.done()};
}

/// Gram matrix and pairwise cosines of make_etf for K = 2..16.
inline std::vector<PropertyResult> etf_suite(std::uint64_t seed) {
  using namespace detail;
  Rng rng(derive_seed(seed, 15));
  Tracker gram("etf_gram", 1e-10), cosine("etf_cosine", 1e-10);
  for (std::size_t K = 2; K <= 16; ++K) {
    const std::size_t d = K + rng.below(9);
    const auto f = collapse::make_etf(d, K, rng);
    gram.add(max_abs_diff(matmul_tn(f.M, f.M), collapse::EtfFrame::expected_gram(K)));
    const Matrix mt = transpose(f.M);
    const double target = -1.0 / (static_cast<double>(K) - 1.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = i + 1; j < K; ++j)
        worst = std::max(worst, std::abs(dot(mt.row(i), mt.row(j)) / (norm(mt.row(i)) * norm(mt.row(j))) - target));
    cosine.add(worst);
  }
  return {gram.done(), cosine.done()};
}

namespace detail {

/// CE on the main head, BinaryKL on the main head and BinaryKL-Norm on the aux head.
struct NetworkObjective {
  Matrix x, zt;
  std::vector<std::size_t> y;
  double tau = 2.0, a_bkl = 0.7, a_norm = 1.3;

  double value(const model::DualHeadNet& net) const {
    const auto fw = model::forward(net, x);
    using losses::Reduction;
    double v = losses::ce_loss(fw.main_logits, y, Reduction::mean).value +
               a_bkl * losses::binary_kl_loss(fw.main_logits, zt, tau, Reduction::mean).value;
    if (net.aux_head) v += a_norm * losses::binary_kl_norm_loss(fw.aux_logits, zt, tau, Reduction::mean).value;
    return v;
  }

  model::GradientBuffer gradient(const model::DualHeadNet& net) const {
    using losses::Reduction;
    const auto fw = model::forward(net, x);
    Matrix g_main = losses::ce_loss(fw.main_logits, y, Reduction::mean).grad;
    axpy(a_bkl, losses::binary_kl_loss(fw.main_logits, zt, tau, Reduction::mean).grad.flat(), g_main.flat());
    Matrix g_aux;
    if (net.aux_head) g_aux = scaled(losses::binary_kl_norm_loss(fw.aux_logits, zt, tau, Reduction::mean).grad, a_norm);
    auto bw = model::backward(net, fw.cache, g_main, g_aux);
    model::add_into(bw.backbone_from_main, bw.backbone_from_aux);
    return {std::move(bw.backbone_from_main), std::move(bw.main_head), std::move(bw.aux_head)};
  }
};

/// Smallest |pre-activation| feeding a ReLU anywhere in the network.
inline double kink_margin(const model::DualHeadNet& net, const Matrix& x) {
  const auto fw = model::forward(net, x);
  double m = std::numeric_limits<double>::infinity();
  auto scan = [&](const model::Mlp& mlp, const model::MlpCache& cache) {
    for (std::size_t l = 0; l < mlp.layers.size(); ++l)
      if (model::relu_after(mlp, l))
        for (double v : cache.pre[l].flat()) m = std::min(m, std::abs(v));
  };
  scan(net.backbone, fw.cache.backbone);
  scan(net.main_head, fw.cache.main_head);
  if (net.aux_head) scan(*net.aux_head, fw.cache.aux_head);
  return m;
}

}  // namespace detail

/// Full dual-head backward pass against per-parameter central differences.
/// Instances whose ReLU inputs come within 1e-3 of zero are redrawn.
inline PropertyResult network_suite(std::size_t instances, std::uint64_t seed) {
  using namespace detail;
  Rng rng(derive_seed(seed, 16));
  Tracker t("fd_dual_head_network", kNetworkTol.rel);
  constexpr double kStep = 1e-6, kMargin = 1e-3;
  std::size_t made = 0;
  while (made < instances) {
    const std::size_t D = pick(rng, 2, 10), K = pick(rng, 2, 5), B = pick(rng, 1, 5);
    const std::vector<std::size_t> widths{pick(rng, 2, 16), pick(rng, 2, 8)};
    const auto aux = made % 2 == 0 ? model::AuxHeadKind::mlp : model::AuxHeadKind::linear;
    auto net = model::make_dual_head_net(D, widths, K, aux, pick(rng, 2, 16), rng);
    for (auto& l : net.backbone.layers)
      for (double& v : l.bias) v = 0.1 * rng.normal();
    NetworkObjective obj{random_matrix(B, D, rng), random_matrix(B, K, rng, 2.0), std::vector<std::size_t>(B)};
    for (auto& v : obj.y) v = rng.below(K);
    if (kink_margin(net, obj.x) < kMargin) continue;
    ++made;

    std::vector<double> analytic;
    const model::GradientBuffer grad = obj.gradient(net);
    model::for_each_tensor(grad, [&](std::span<const double> g) {
      analytic.insert(analytic.end(), g.begin(), g.end());
    });
    std::vector<double> numeric;
    model::DualHeadNet probe = net;
    model::for_each_tensor(probe, [&](std::span<double> theta) {
      for (double& p : theta) {
        const double keep = p;
        p = keep + kStep;
        const double fp = obj.value(probe);
        p = keep - kStep;
        const double fm = obj.value(probe);
        p = keep;
        numeric.push_back((fp - fm) / (2.0 * kStep));
      }
    });
    t.add(fd_error(analytic, numeric, kNetworkTol));
  }
  return t.done();
}

inline std::vector<PropertyResult> run_all(const VerifyOptions& o) {
  std::vector<PropertyResult> out;
  auto append = [&](std::vector<PropertyResult> v) { out.insert(out.end(), v.begin(), v.end()); };
  append(loss_suite(o.loss_instances, o.seed, o.flip_bkl_grad));
  append(theory_fd_suite(o.theory_instances, o.seed));
  out.push_back(obstacle_sign_suite(o.obstacle_draws, o.seed));
  append(projection_suite(o.projection_pairs, o.seed));
  append(etf_suite(o.seed));
  out.push_back(network_suite(o.network_instances, o.seed));
  return out;
}

inline bool all_passed(const std::vector<PropertyResult>& rs) {
  for (const auto& r : rs)
    if (!r.passed) return false;
  return !rs.empty();
}

/// property,status,worst,limit,cases
inline void write_report(std::ostream& os, const std::vector<PropertyResult>& rs) {
  os << "property,status,worst,limit,cases\n";
  const auto old = os.precision(6);
  for (const auto& r : rs) {
    os << r.name << ',' << (r.passed ? "pass" : "FAIL") << ',' << std::scientific << r.worst << ',' << r.limit
       << std::defaultfloat << ',' << r.cases << '\n';
  }
  os.precision(old);
}

}  // namespace dhkd::verify
