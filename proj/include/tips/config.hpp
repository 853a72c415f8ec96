#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tips/data.hpp"
#include "tips/model.hpp"
#include "tips/regularizers.hpp"
#include "tips/shift.hpp"

namespace tips {

enum class DataSource { synthetic, idx };

/// Everything that determines a training/evaluation run.
struct RunConfig {
  ModelConfig model;

  DataSource data = DataSource::synthetic;
  SyntheticSpec synthetic;
  std::string train_images, train_labels, test_images, test_labels;

  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double alpha = 0.35;
  double epsilon = 0.4;
  bool use_fm = true;
  bool use_undo = true;
  UndoTarget undo_target = UndoTarget::shifted;
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  /// Epochs without validation improvement before stopping; 0 disables.
  std::size_t patience = 10;
  double val_fraction = 0.1;

  ShiftSampler eval_sampler;
  ShiftMode shift_mode = ShiftMode::standard;
  std::vector<std::size_t> patch_sizes;

  std::string out_dir = "out";

  LossSchedule schedule(std::size_t epoch) const { return {alpha, epsilon, epochs, epoch}; }

  void validate() const {
    model.validate();
    try {
      schedule(0).validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (lr < 0) throw ConfigError("lr must be >= 0");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (val_fraction < 0 || val_fraction >= 1) throw ConfigError("val_fraction must be in [0,1)");
    if (eval_sampler.pairs_per_image == 0) throw ConfigError("pairs_per_image must be >= 1");
    if (eval_sampler.max_fraction < 0 || eval_sampler.max_fraction > 1) throw ConfigError("shift_fraction must be in [0,1]");
    if (data == DataSource::idx && (train_images.empty() || train_labels.empty() || test_images.empty() ||
                                    test_labels.empty())) {
      throw ConfigError("idx data source needs train_images, train_labels, test_images and test_labels");
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

/// Shortest round-tripping decimal for a double.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  const char* first = text.data();
  const char* last = first + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

}  // namespace detail

inline PoolKind parse_pool_kind(const std::string& v) {
  if (v == "max") return PoolKind::max;
  if (v == "avg") return PoolKind::avg;
  if (v == "blur") return PoolKind::blur;
  if (v == "aps") return PoolKind::aps;
  if (v == "tips") return PoolKind::tips;
  if (v == "gap") return PoolKind::gap_only;
  throw ConfigError("unknown pool kind '" + v + "' (expected max, avg, blur, aps, tips, gap)");
}

inline ShiftMode parse_shift_mode(const std::string& v) {
  if (v == "standard") return ShiftMode::standard;
  if (v == "circular") return ShiftMode::circular;
  throw ConfigError("unknown shift mode '" + v + "'");
}

inline PaddingMode parse_padding(const std::string& v) {
  if (v == "zero") return PaddingMode::zero;
  if (v == "circular") return PaddingMode::circular;
  throw ConfigError("unknown padding mode '" + v + "'");
}

/// Applies one `key = value` assignment; unknown keys are rejected.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_number;
  auto num = [&](auto& field) { field = parse_number<std::remove_reference_t<decltype(field)>>(key, value); };
  if (key == "pool") c.model.pool = parse_pool_kind(value);
  else if (key == "num_pooling_layers") num(c.model.num_pooling_layers);
  else if (key == "lpf") num(c.model.lpf);
  else if (key == "num_classes") num(c.model.num_classes);
  else if (key == "in_channels") num(c.model.in_channels);
  else if (key == "padding") c.model.padding = parse_padding(value);
  else if (key == "stride") num(c.model.stride);
  else if (key == "aps_p") num(c.model.aps_p);
  else if (key == "shared_psi") c.model.shared_psi = parse_bool(key, value);
  else if (key == "batch_norm") c.model.batch_norm = parse_bool(key, value);
  else if (key == "stages") {
    // "16x2,32x2,64x2": channels x conv blocks per stage.
    std::vector<StageSpec> stages;
    for (const auto& part : detail::split(value, ',')) {
      const auto x = part.find('x');
      if (x == std::string::npos) throw ConfigError("stages: expected CxB entries, got '" + part + "'");
      stages.push_back({parse_number<std::size_t>(key, part.substr(0, x)), parse_number<std::size_t>(key, part.substr(x + 1))});
    }
    if (stages.empty()) throw ConfigError("stages: empty list");
    c.model.stages = stages;
  } else if (key == "data") {
    if (value == "synthetic") c.data = DataSource::synthetic;
    else if (value == "idx") c.data = DataSource::idx;
    else throw ConfigError("data must be synthetic or idx");
  } else if (key == "synth_seed") num(c.synthetic.seed);
  else if (key == "synth_n_train") num(c.synthetic.n_train);
  else if (key == "synth_n_test") num(c.synthetic.n_test);
  else if (key == "synth_image_size") num(c.synthetic.image_size);
  else if (key == "synth_num_classes") num(c.synthetic.num_classes);
  else if (key == "synth_min_scale") num(c.synthetic.min_scale);
  else if (key == "synth_max_scale") num(c.synthetic.max_scale);
  else if (key == "synth_margin") num(c.synthetic.margin);
  else if (key == "synth_noise") num(c.synthetic.noise);
  else if (key == "train_images") c.train_images = value;
  else if (key == "train_labels") c.train_labels = value;
  else if (key == "test_images") c.test_images = value;
  else if (key == "test_labels") c.test_labels = value;
  else if (key == "lr") num(c.lr);
  else if (key == "momentum") num(c.momentum);
  else if (key == "weight_decay") num(c.weight_decay);
  else if (key == "alpha") num(c.alpha);
  else if (key == "epsilon") num(c.epsilon);
  else if (key == "use_fm") c.use_fm = parse_bool(key, value);
  else if (key == "use_undo") c.use_undo = parse_bool(key, value);
  else if (key == "undo_target") {
    if (value == "shifted") c.undo_target = UndoTarget::shifted;
    else if (value == "unshifted") c.undo_target = UndoTarget::unshifted;
    else throw ConfigError("undo_target must be shifted or unshifted");
  } else if (key == "epochs") num(c.epochs);
  else if (key == "batch_size") num(c.batch_size);
  else if (key == "seed") num(c.seed);
  else if (key == "patience") num(c.patience);
  else if (key == "val_fraction") num(c.val_fraction);
  else if (key == "pairs_per_image") num(c.eval_sampler.pairs_per_image);
  else if (key == "shift_fraction") num(c.eval_sampler.max_fraction);
  else if (key == "shift_mode") c.shift_mode = parse_shift_mode(value);
  else if (key == "patch_sizes") {
    c.patch_sizes.clear();
    for (const auto& p : detail::split(value, ',')) c.patch_sizes.push_back(parse_number<std::size_t>(key, p));
  } else if (key == "out") c.out_dir = value;
  else throw ConfigError("unknown config key '" + key + "'");
}

/// Parses flat `key = value` text; '#' starts a comment line.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text form; parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const RunConfig& c, bool include_out = true) {
  using detail::format_double;
  std::ostringstream os;
  auto kv = [&](const char* k, const std::string& v) { os << k << " = " << v << '\n'; };
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  std::string stages;
  for (std::size_t i = 0; i < c.model.stages.size(); ++i) {
    stages += (i ? "," : "") + std::to_string(c.model.stages[i].channels) + "x" + std::to_string(c.model.stages[i].blocks);
  }
  kv("pool", to_string(c.model.pool));
  kv("num_pooling_layers", std::to_string(c.model.num_pooling_layers));
  kv("lpf", std::to_string(c.model.lpf));
  kv("stages", stages);
  kv("num_classes", std::to_string(c.model.num_classes));
  kv("in_channels", std::to_string(c.model.in_channels));
  kv("padding", to_string(c.model.padding));
  kv("stride", std::to_string(c.model.stride));
  kv("aps_p", format_double(c.model.aps_p));
  kv("shared_psi", b(c.model.shared_psi));
  kv("batch_norm", b(c.model.batch_norm));
  kv("data", c.data == DataSource::synthetic ? "synthetic" : "idx");
  kv("synth_seed", std::to_string(c.synthetic.seed));
  kv("synth_n_train", std::to_string(c.synthetic.n_train));
  kv("synth_n_test", std::to_string(c.synthetic.n_test));
  kv("synth_image_size", std::to_string(c.synthetic.image_size));
  kv("synth_num_classes", std::to_string(c.synthetic.num_classes));
  kv("synth_min_scale", format_double(c.synthetic.min_scale));
  kv("synth_max_scale", format_double(c.synthetic.max_scale));
  kv("synth_margin", format_double(c.synthetic.margin));
  kv("synth_noise", format_double(c.synthetic.noise));
  if (!c.train_images.empty()) kv("train_images", c.train_images);
  if (!c.train_labels.empty()) kv("train_labels", c.train_labels);
  if (!c.test_images.empty()) kv("test_images", c.test_images);
  if (!c.test_labels.empty()) kv("test_labels", c.test_labels);
  kv("lr", format_double(c.lr));
  kv("momentum", format_double(c.momentum));
  kv("weight_decay", format_double(c.weight_decay));
  kv("alpha", format_double(c.alpha));
  kv("epsilon", format_double(c.epsilon));
  kv("use_fm", b(c.use_fm));
  kv("use_undo", b(c.use_undo));
  kv("undo_target", c.undo_target == UndoTarget::shifted ? "shifted" : "unshifted");
  kv("epochs", std::to_string(c.epochs));
  kv("batch_size", std::to_string(c.batch_size));
  kv("seed", std::to_string(c.seed));
  kv("patience", std::to_string(c.patience));
  kv("val_fraction", format_double(c.val_fraction));
  kv("pairs_per_image", std::to_string(c.eval_sampler.pairs_per_image));
  kv("shift_fraction", format_double(c.eval_sampler.max_fraction));
  kv("shift_mode", to_string(c.shift_mode));
  std::string patches;
  for (std::size_t i = 0; i < c.patch_sizes.size(); ++i) patches += (i ? "," : "") + std::to_string(c.patch_sizes[i]);
  if (!patches.empty()) kv("patch_sizes", patches);
  if (include_out) kv("out", c.out_dir);
  return os.str();
}

/// FNV-1a digest of the canonical config text (output directory excluded).
inline std::string config_digest(const RunConfig& c) {
  const std::string text = serialize_config(c, false);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace tips
