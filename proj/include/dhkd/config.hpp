#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dhkd/data.hpp"
#include "dhkd/model.hpp"

namespace dhkd::harness {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Setting { ce_only, bkl_only, ce_plus_bkl, dhkd, dhkd_vanilla };

inline constexpr Setting kAllSettings[] = {Setting::ce_only, Setting::bkl_only, Setting::ce_plus_bkl,
                                           Setting::dhkd, Setting::dhkd_vanilla};

inline std::string to_string(Setting s) {
  switch (s) {
    case Setting::ce_only: return "ce_only";
    case Setting::bkl_only: return "bkl_only";
    case Setting::ce_plus_bkl: return "ce_plus_bkl";
    case Setting::dhkd: return "dhkd";
    case Setting::dhkd_vanilla: return "dhkd_vanilla";
  }
  return "?";
}

inline Setting parse_setting(std::string_view v) {
  for (Setting s : kAllSettings)
    if (to_string(s) == v) return s;
  throw ConfigError("unknown setting '" + std::string(v) + "'");
}

/// Settings whose student carries an auxiliary head.
inline bool dual_head(Setting s) { return s == Setting::dhkd || s == Setting::dhkd_vanilla; }

inline std::string to_string(model::AuxHeadKind k) {
  switch (k) {
    case model::AuxHeadKind::none: return "none";
    case model::AuxHeadKind::linear: return "linear";
    case model::AuxHeadKind::mlp: return "mlp";
  }
  return "?";
}

struct RunConfig {
  // Synthetic data; ignored when IDX paths are given.
  data::SyntheticSpec data{};
  double train_fraction = 5.0 / 7.0;  // 500 train + 200 test per class at the default 700
  std::string train_images, train_labels, test_images, test_labels;

  std::vector<std::size_t> teacher_widths{256};
  std::vector<std::size_t> student_widths{32, 16};
  model::AuxHeadKind aux_head = model::AuxHeadKind::mlp;
  std::size_t aux_hidden = model::kDefaultAuxHidden;

  double tau = 2.0;
  double alpha = 1.0;
  bool alignment = true;

  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 60;
  std::vector<std::size_t> milestones{30, 45};
  std::size_t batch_size = 64;
  std::optional<double> clip_norm;

  std::size_t teacher_epochs = 30;
  double teacher_lr = 0.01;
  std::vector<std::size_t> teacher_milestones{20};

  std::uint64_t seed = 0;
  Setting setting = Setting::dhkd;

  // wall_ms is logged as 0 unless set, keeping CSVs reproducible byte for byte.
  bool timing = false;

  bool uses_idx() const { return !train_images.empty(); }

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be > 0");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be >= 0");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
    if (!(teacher_lr > 0.0) || !std::isfinite(teacher_lr)) throw ConfigError("teacher_lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be > 0");
    if (teacher_widths.empty() || student_widths.empty()) throw ConfigError("widths must be non-empty");
    for (auto w : teacher_widths)
      if (w == 0) throw ConfigError("teacher_widths entries must be > 0");
    for (auto w : student_widths)
      if (w == 0) throw ConfigError("student_widths entries must be > 0");
    if (aux_head == model::AuxHeadKind::none) throw ConfigError("aux_head must be linear or mlp");
    if (aux_head == model::AuxHeadKind::mlp && aux_hidden == 0) throw ConfigError("aux_hidden must be > 0");
    if (clip_norm && !(*clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
    const bool any_idx = !train_images.empty() || !train_labels.empty() || !test_images.empty() ||
                         !test_labels.empty();
    const bool all_idx = !train_images.empty() && !train_labels.empty() && !test_images.empty() &&
                         !test_labels.empty();
    if (any_idx && !all_idx) throw ConfigError("IDX input needs all four of train/test images/labels");
  }
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw ConfigError("bad value for " + key + ": '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
  if (v == "off" || v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (v.empty() || v == "none") return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(key, trim(item)));
  return out;
}

}  // namespace config_detail

/// Every key accepted by apply_option, in snake_case.
inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "setting",        "seed",          "classes",        "dim",          "per_class",
      "separation",     "data_seed",     "train_fraction", "train_images", "train_labels",
      "test_images",    "test_labels",   "teacher_widths", "student_widths", "aux_head",
      "aux_hidden",     "tau",           "alpha",          "alignment",    "lr",
      "momentum",       "weight_decay",  "epochs",         "milestones",   "batch_size",
      "clip_norm",      "teacher_epochs", "teacher_lr",    "teacher_milestones", "timing"};
  return keys;
}

/// Sets one field. Keys may be snake_case or kebab-case.
inline void apply_option(RunConfig& c, std::string key, const std::string& raw) {
  using namespace config_detail;
  std::replace(key.begin(), key.end(), '-', '_');
  const std::string v = trim(raw);
  if (key == "setting") c.setting = parse_setting(v);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "classes") c.data.classes = parse_number<std::size_t>(key, v);
  else if (key == "dim") c.data.dim = parse_number<std::size_t>(key, v);
  else if (key == "per_class") c.data.per_class = parse_number<std::size_t>(key, v);
  else if (key == "separation") c.data.separation = parse_number<double>(key, v);
  else if (key == "data_seed") c.data.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "train_fraction") c.train_fraction = parse_number<double>(key, v);
  else if (key == "train_images") c.train_images = v;
  else if (key == "train_labels") c.train_labels = v;
  else if (key == "test_images") c.test_images = v;
  else if (key == "test_labels") c.test_labels = v;
  else if (key == "teacher_widths") c.teacher_widths = parse_list(key, v);
  else if (key == "student_widths") c.student_widths = parse_list(key, v);
  else if (key == "aux_head") {
    if (v == "linear") c.aux_head = model::AuxHeadKind::linear;
    else if (v == "mlp") c.aux_head = model::AuxHeadKind::mlp;
    else throw ConfigError("aux_head must be linear or mlp, got '" + v + "'");
  }
  else if (key == "aux_hidden") c.aux_hidden = parse_number<std::size_t>(key, v);
  else if (key == "tau") c.tau = parse_number<double>(key, v);
  else if (key == "alpha") c.alpha = parse_number<double>(key, v);
  else if (key == "alignment") c.alignment = parse_bool(key, v);
  else if (key == "lr") c.lr = parse_number<double>(key, v);
  else if (key == "momentum") c.momentum = parse_number<double>(key, v);
  else if (key == "weight_decay") c.weight_decay = parse_number<double>(key, v);
  else if (key == "epochs") c.epochs = parse_number<std::size_t>(key, v);
  else if (key == "milestones") c.milestones = parse_list(key, v);
  else if (key == "batch_size") c.batch_size = parse_number<std::size_t>(key, v);
  else if (key == "clip_norm") {
    if (v == "none" || v.empty()) c.clip_norm.reset();
    else c.clip_norm = parse_number<double>(key, v);
  }
  else if (key == "teacher_epochs") c.teacher_epochs = parse_number<std::size_t>(key, v);
  else if (key == "teacher_lr") c.teacher_lr = parse_number<double>(key, v);
  else if (key == "teacher_milestones") c.teacher_milestones = parse_list(key, v);
  else if (key == "timing") c.timing = parse_bool(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

/// Applies `key = value` lines; `#` starts a comment.
inline void apply_config_text(RunConfig& c, std::istream& in, const std::string& origin = "config") {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = config_detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      apply_option(c, config_detail::trim(std::string_view(t).substr(0, eq)), t.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  apply_config_text(c, in, path);
}

}  // namespace dhkd::harness
