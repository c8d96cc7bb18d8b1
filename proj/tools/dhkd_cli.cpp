// dhkd command-line driver: gen-data, train-teacher, distill, compare,
// diagnose, verify.
//
// Exit codes: 0 success, 1 usage or input error, 2 collapse detected
// (distill without --allow-collapse), 3 verification failure.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "dhkd/dhkd.hpp"

namespace {

namespace fs = std::filesystem;
using namespace dhkd;
using harness::RunConfig;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitCollapse = 2;
constexpr int kExitVerify = 3;

std::string kebab(std::string s) {
  for (char& c : s)
    if (c == '_') c = '-';
  return s;
}

/// --config plus one kebab-case flag per RunConfig field.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "file of `key = value` lines; flags override it");
    for (const auto& key : harness::config_keys()) app->add_option("--" + kebab(key), values[key]);
  }

  RunConfig resolve(const CLI::App* app) const {
    RunConfig c;
    if (!config_path.empty()) harness::apply_config_file(c, config_path);
    for (const auto& [key, v] : values)
      if (app->count("--" + kebab(key)) > 0) harness::apply_option(c, key, v);
    c.validate();
    return c;
  }
};

std::ofstream open_out(const std::string& path) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

void print_epoch(const harness::EpochLog& l) {
  std::cerr << l.setting << " seed " << l.seed << " epoch " << l.epoch << ": acc_main "
            << harness::format_double(l.acc_main);
  if (!std::isnan(l.acc_aux)) std::cerr << " acc_aux " << harness::format_double(l.acc_aux);
  if (!std::isnan(l.conflict_rate)) std::cerr << " conflict_rate " << harness::format_double(l.conflict_rate);
  if (l.collapsed) std::cerr << " COLLAPSED";
  std::cerr << '\n';
}

void write_log(const std::string& path, const std::vector<harness::EpochLog>& logs) {
  auto out = open_out(path);
  harness::write_epoch_csv(out, logs);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-head knowledge distillation lab"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "suppress per-epoch progress on stderr");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write the synthetic train/test split as IDX files");
  ConfigFlags gen_cfg;
  gen_cfg.attach(gen);
  std::string gen_dir = "data";
  gen->add_option("--out-dir", gen_dir, "directory for the four IDX files");

  // train-teacher
  auto* teach = app.add_subcommand("train-teacher", "train the teacher with cross-entropy");
  ConfigFlags teach_cfg;
  teach_cfg.attach(teach);
  std::string teach_out = "teacher.dhkd", teach_log = "teacher.csv";
  teach->add_option("--out", teach_out, "teacher model file");
  teach->add_option("--log", teach_log, "per-epoch CSV");

  // distill
  auto* dist = app.add_subcommand("distill", "distill a student from a teacher file");
  ConfigFlags dist_cfg;
  dist_cfg.attach(dist);
  std::string dist_teacher, dist_out = "student.dhkd", dist_log = "distill.csv", dist_dots;
  bool allow_collapse = false;
  dist->add_option("--teacher", dist_teacher, "teacher model file")->required();
  dist->add_option("--out", dist_out, "student model file");
  dist->add_option("--log", dist_log, "per-epoch CSV");
  dist->add_option("--dots-out", dist_dots, "CSV of every backbone g_aux . g_ce per epoch");
  dist->add_flag("--allow-collapse", allow_collapse, "exit 0 even if the run collapsed");

  // compare
  auto* cmp = app.add_subcommand("compare", "all settings across seeds, one teacher per seed");
  ConfigFlags cmp_cfg;
  cmp_cfg.attach(cmp);
  std::vector<std::uint64_t> cmp_seeds{0, 1, 2, 3, 4};
  std::vector<std::string> cmp_settings;
  std::string cmp_dir = "compare";
  cmp->add_option("--seeds", cmp_seeds, "seeds to run")->delimiter(',');
  cmp->add_option("--settings", cmp_settings, "subset of settings (default: all five)")->delimiter(',');
  cmp->add_option("--out-dir", cmp_dir, "directory for per-run CSVs and summary.csv");

  // diagnose
  auto* diag = app.add_subcommand("diagnose", "NC metrics, correlation gap and coefficient signs");
  ConfigFlags diag_cfg;
  diag_cfg.attach(diag);
  std::string diag_model, diag_teacher, diag_split = "train", diag_out, diag_coeffs;
  std::size_t diag_batch = 64;
  diag->add_option("--model", diag_model, "student model file")->required();
  diag->add_option("--teacher", diag_teacher, "teacher model file")->required();
  diag->add_option("--split", diag_split, "dataset split to diagnose on")->check(CLI::IsMember({"train", "test"}));
  diag->add_option("--out", diag_out, "metric CSV (default: stdout)");
  diag->add_option("--coefficients", diag_coeffs, "pull/push coefficient CSV for the sign-report batch");
  diag->add_option("--batch", diag_batch, "samples in the sign-report batch");

  // verify
  auto* ver = app.add_subcommand("verify", "run every property suite");
  dhkd::verify::VerifyOptions vopt;
  ver->add_option("--seed", vopt.seed, "suite seed");
  ver->add_flag("--mutate-flip-bkl", vopt.flip_bkl_grad, "negate the BinaryKL gradient (mutation sanity)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  harness::TrainOptions topts;
  if (!quiet) topts.on_epoch = print_epoch;

  try {
    if (gen->parsed()) {
      const RunConfig c = gen_cfg.resolve(gen);
      if (c.uses_idx()) throw harness::ConfigError("gen-data writes synthetic data; drop the IDX paths");
      const auto split = harness::load_data(c);
      fs::create_directories(gen_dir);
      const fs::path d(gen_dir);
      data::save_idx(split.train, (d / "train-images.idx").string(), (d / "train-labels.idx").string());
      data::save_idx(split.test, (d / "test-images.idx").string(), (d / "test-labels.idx").string());
      std::cout << "wrote " << split.train.size() << " train and " << split.test.size() << " test samples to "
                << gen_dir << '\n';
      return kExitOk;
    }

    if (teach->parsed()) {
      const RunConfig c = teach_cfg.resolve(teach);
      const auto split = harness::load_data(c);
      const auto r = harness::train_teacher(c, split, topts);
      write_log(teach_log, r.logs);
      model::save_model(r.net, teach_out);
      std::cout << "teacher test accuracy " << harness::format_double(r.final_acc()) << '\n';
      if (r.collapsed()) {
        std::cerr << "teacher training collapsed at epoch " << *r.collapse_epoch << '\n';
        return kExitCollapse;
      }
      return kExitOk;
    }

    if (dist->parsed()) {
      const RunConfig c = dist_cfg.resolve(dist);
      const auto split = harness::load_data(c);
      const auto teacher = model::load_model(dist_teacher);
      topts.record_dots = !dist_dots.empty();
      const auto r = harness::distill(c, teacher, split, topts);
      write_log(dist_log, r.logs);
      model::save_model(r.net, dist_out);
      if (!dist_dots.empty()) {
        auto out = open_out(dist_dots);
        out << "epoch,step,tensor,dot\n";
        const std::size_t t = std::max<std::size_t>(1, r.backbone_tensors);
        for (std::size_t e = 0; e < r.epoch_dots.size(); ++e)
          for (std::size_t i = 0; i < r.epoch_dots[e].size(); ++i)
            out << e + 1 << ',' << i / t << ',' << i % t << ',' << harness::format_double(r.epoch_dots[e][i]) << '\n';
      }
      std::cout << harness::to_string(c.setting) << " final accuracy " << harness::format_double(r.final_acc())
                << '\n';
      if (r.collapsed()) {
        std::cerr << "collapse detected at epoch " << *r.collapse_epoch << '\n';
        if (!allow_collapse) return kExitCollapse;
      }
      return kExitOk;
    }

    if (cmp->parsed()) {
      const RunConfig c = cmp_cfg.resolve(cmp);
      std::vector<harness::Setting> settings;
      for (const auto& s : cmp_settings) settings.push_back(harness::parse_setting(s));
      if (settings.empty()) settings.assign(std::begin(harness::kAllSettings), std::end(harness::kAllSettings));
      const fs::path d(cmp_dir);
      fs::create_directories(d);
      harness::CompareHooks hooks;
      hooks.on_teacher = [&](std::uint64_t seed, const harness::RunResult& r) {
        write_log((d / ("teacher_seed" + std::to_string(seed) + ".csv")).string(), r.logs);
        if (!quiet) std::cerr << "teacher seed " << seed << ": " << harness::format_double(r.final_acc()) << '\n';
      };
      hooks.on_run = [&](harness::Setting s, std::uint64_t seed, const harness::RunResult& r) {
        write_log((d / (harness::to_string(s) + "_seed" + std::to_string(seed) + ".csv")).string(), r.logs);
        if (!quiet) {
          std::cerr << harness::to_string(s) << " seed " << seed << ": " << harness::format_double(r.final_acc())
                    << (r.collapsed() ? " (collapsed)" : "") << '\n';
        }
      };
      const auto res = harness::compare(c, cmp_seeds, settings, hooks);
      {
        auto out = open_out((d / "summary.csv").string());
        harness::write_compare_csv(out, res);
      }
      std::cout << "setting,median_final_acc\n";
      for (auto s : settings) std::cout << harness::to_string(s) << ',' << harness::format_double(res.median_acc(s)) << '\n';
      return kExitOk;
    }

    if (diag->parsed()) {
      const RunConfig c = diag_cfg.resolve(diag);
      const auto split = harness::load_data(c);
      const auto student = model::load_model(diag_model);
      const auto teacher = model::load_model(diag_teacher);
      const auto& ds = diag_split == "train" ? split.train : split.test;
      const auto d = harness::diagnose(student, teacher, ds, c.tau, diag_batch);
      if (diag_out.empty()) {
        harness::write_diagnostics_csv(std::cout, d);
      } else {
        auto out = open_out(diag_out);
        harness::write_diagnostics_csv(out, d);
      }
      if (!diag_coeffs.empty()) {
        auto out = open_out(diag_coeffs);
        theory::write_coefficients_csv(out, d.signs, d.sign_features);
      }
      return kExitOk;
    }

    if (ver->parsed()) {
      const auto results = dhkd::verify::run_all(vopt);
      dhkd::verify::write_report(std::cout, results);
      return dhkd::verify::all_passed(results) ? kExitOk : kExitVerify;
    }
  } catch (const harness::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
