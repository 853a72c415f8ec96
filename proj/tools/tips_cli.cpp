#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tips/tips.hpp"

namespace fs = std::filesystem;
using namespace tips;
using Real = float;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

/// Flag values collected as config assignments, applied after --config.
struct Overrides {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::vector<std::string> sets;
  std::vector<std::string> patch_sizes;

  void bind(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(flag, [this, key](const std::string& v) { values[key] = v; }, help);
  }

  RunConfig resolve(RunConfig base = {}) const {
    RunConfig c = config_path.empty() ? base : load_config(config_path);
    for (const auto& [k, v] : values) set_config_value(c, k, v);
    if (!patch_sizes.empty()) {
      std::string joined;
      for (const auto& p : patch_sizes) joined += (joined.empty() ? "" : ",") + p;
      set_config_value(c, "patch_sizes", joined);
    }
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_config_value(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    c.validate();
    return c;
  }
};

void add_shared(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_path, "Run configuration file (key = value lines)");
  o.bind(app, "--seed", "seed", "Master seed");
  o.bind(app, "--out", "out", "Output directory");
  app->add_option("--set", o.sets, "Extra config assignment key=value (repeatable)");
}

void add_train_flags(CLI::App* app, Overrides& o) {
  o.bind(app, "--pool", "pool", "Pooling kind: max, avg, blur, aps, tips, gap");
  o.bind(app, "--lpf", "lpf", "Low-pass filter size: 0, 3 or 5");
  o.bind(app, "--layers", "num_pooling_layers", "Number of pooling layers");
  o.bind(app, "--epsilon", "epsilon", "Fraction of epochs before the undo term starts");
  o.bind(app, "--alpha", "alpha", "Weight of the undo term");
  o.bind(app, "--epochs", "epochs", "Training epochs");
  o.bind(app, "--lr", "lr", "Learning rate");
  o.bind(app, "--momentum", "momentum", "SGD momentum");
  o.bind(app, "--weight-decay", "weight_decay", "L2 weight decay");
  o.bind(app, "--batch-size", "batch_size", "Mini-batch size");
  o.bind(app, "--shift-mode", "shift_mode", "Shift mode for patch-attack consistency: standard or circular");
  o.bind(app, "--pairs-per-image", "pairs_per_image", "Shift pairs per image for consistency");
  app->add_option("--patch-size", o.patch_sizes, "Patch-erase size for robustness evaluation (repeatable)");
}

void print_warnings(const std::vector<std::string>& w) {
  for (const auto& s : w) std::cerr << "warning: " << s << '\n';
}

void write_checkpoint(const fs::path& path, const Model<Real>& model, const RunConfig& cfg, std::uint64_t epoch) {
  fs::create_directories(path.parent_path());
  save_checkpoint(make_checkpoint(model, serialize_config(cfg, false), epoch), path.string());
}

int cmd_gen_data(const RunConfig& cfg) {
  const auto d = gen_synthetic<Real>(cfg.synthetic);
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  write_idx(d.train, (out / "train-images.idx").string(), (out / "train-labels.idx").string());
  write_idx(d.test, (out / "test-images.idx").string(), (out / "test-labels.idx").string());
  std::cout << "wrote " << d.train.size() << " train and " << d.test.size() << " test images to " << out.string() << '\n';
  return kOk;
}

int cmd_train(const RunConfig& cfg) {
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  write_text(out / "config.txt", serialize_config(cfg));
  const auto data = load_data<Real>(cfg);
  std::cout << "config " << config_digest(cfg) << ": " << to_string(cfg.model.pool) << ", " << data.train.size()
            << " train / " << data.val.size() << " val / " << data.test.size() << " test\n";
  auto r = train(cfg, data, [](const EpochLog& e) {
    std::printf("epoch %3zu  task %.4f  train %.4f  val %s%s\n", e.epoch, e.l_task, e.train_acc,
                e.val_acc ? std::to_string(*e.val_acc).c_str() : "-", e.l_undo ? "  (undo)" : "");
    std::fflush(stdout);
    return true;
  });
  print_warnings(r.warnings);
  write_text(out / "train_log.csv", train_log_csv(cfg, r.log));
  write_checkpoint(out / "model.ckpt", r.model, cfg, r.best_epoch);
  std::cout << (r.stopped_early ? "stopped early; " : "") << "kept epoch " << r.best_epoch << ", checkpoint "
            << (out / "model.ckpt").string() << '\n';
  return kOk;
}

/// Config from --config when given, otherwise the one embedded in the checkpoint.
RunConfig eval_config(const Overrides& o, const std::string& ckpt_path, Checkpoint& ckpt) {
  ckpt = load_checkpoint(ckpt_path);
  RunConfig base = parse_config(ckpt.config_text);
  return o.resolve(base);
}

int cmd_eval(const Overrides& o, const std::string& ckpt_path) {
  Checkpoint ckpt;
  const RunConfig cfg = eval_config(o, ckpt_path, ckpt);
  Model<Real> model(cfg.model, cfg.seed);
  apply_checkpoint(model, ckpt);
  const auto data = load_data<Real>(cfg);
  const MetricsReport m = evaluate(cfg, model, data.test);
  const fs::path out(cfg.out_dir);
  write_text(out / "metrics.csv", metrics_csv(cfg, m));
  write_text(out / "curves.csv", curves_csv(cfg, m));
  const std::string summary = summary_text(m);
  write_text(out / "summary.txt", summary);
  std::cout << summary;
  return kOk;
}

int cmd_msb(const Overrides& o, const std::string& ckpt_path) {
  Checkpoint ckpt;
  const RunConfig cfg = eval_config(o, ckpt_path, ckpt);
  Model<Real> model(cfg.model, cfg.seed);
  apply_checkpoint(model, ckpt);
  const auto data = load_data<Real>(cfg);
  const MsbReport r = model_msb(model, data.test.images, data.test.provenance);
  std::ostringstream os;
  os << report_header("tips-msb/1", cfg) << "layer,msb\n";
  for (std::size_t l = 0; l < r.per_layer.size(); ++l) os << l << ',' << fmt(r.per_layer[l]) << '\n';
  os << "model," << (r.msb ? fmt(*r.msb) : "not_applicable") << '\n';
  write_text(fs::path(cfg.out_dir) / "msb.csv", os.str());
  std::cout << os.str();
  return kOk;
}

int cmd_correlate(const RunConfig& base, const std::vector<std::string>& pools, const std::vector<std::size_t>& layers) {
  const auto grid = make_grid(base, pools, layers);
  std::cout << "grid of " << grid.size() << " configurations\n";
  const auto table = correlate<Real>(grid, [](const RunConfig& c, const CorrelationRecord& r) {
    std::printf("%-5s layers %zu lpf %zu  msb %s  std %.4f  circ %.4f  acc %.4f\n", to_string(c.model.pool),
                c.model.num_pooling_layers, c.model.lpf, r.msb ? std::to_string(*r.msb).c_str() : "n/a",
                r.standard_consistency, r.circular_consistency, r.accuracy);
    std::fflush(stdout);
  });
  const fs::path out(base.out_dir);
  write_text(out / "correlation.csv", correlation_csv(base, table));
  write_text(out / "pearson.csv", pearson_csv(base, table));
  for (const auto& p : table.pearson) {
    std::cout << p.pair << ": " << (p.r ? fmt(*p.r) : "undefined (" + p.note + ")") << " over " << p.points << " points\n";
  }
  return kOk;
}

int cmd_ablate(const RunConfig& base) {
  const auto rows = ablate<Real>(base, [](const AblationRow& r) {
    std::printf("%-9s acc %.4f  std %.4f  fid %.4f  circ %.4f  msb %.4f\n", r.arm.c_str(), r.accuracy,
                r.standard_consistency, r.standard_fidelity, r.circular_consistency, r.msb);
    std::fflush(stdout);
  });
  write_text(fs::path(base.out_dir) / "ablation.csv", ablation_csv(base, rows));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Translation invariant polyphase sampling: training, evaluation and analysis"};
  app.require_subcommand(1);

  Overrides gen_o, train_o, eval_o, msb_o, corr_o, abl_o;
  auto* gen = app.add_subcommand("gen-data", "Write the synthetic shapes dataset as IDX files");
  add_shared(gen, gen_o);
  gen_o.bind(gen, "--n-train", "synth_n_train", "Training images");
  gen_o.bind(gen, "--n-test", "synth_n_test", "Test images");

  auto* tr = app.add_subcommand("train", "Train a model and write its checkpoint and epoch log");
  add_shared(tr, train_o);
  add_train_flags(tr, train_o);

  std::string eval_ckpt, msb_ckpt;
  auto* ev = app.add_subcommand("eval", "Evaluate accuracy, shift consistency/fidelity and MSB of a checkpoint");
  add_shared(ev, eval_o);
  add_train_flags(ev, eval_o);
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();

  auto* ms = app.add_subcommand("msb", "Report the maximum-sampling bias of a checkpoint");
  add_shared(ms, msb_o);
  ms->add_option("--checkpoint", msb_ckpt, "Checkpoint file")->required();

  std::vector<std::string> pools{"max", "avg", "blur", "aps", "tips"};
  std::vector<std::size_t> layers{1, 2, 3};
  auto* co = app.add_subcommand("correlate", "Train a pool-kind x layer-count grid and correlate MSB with invariance");
  add_shared(co, corr_o);
  add_train_flags(co, corr_o);
  co->add_option("--pools", pools, "Pool kinds in the grid")->delimiter(',');
  co->add_option("--layer-counts", layers, "Pooling-layer counts in the grid")->delimiter(',');

  auto* ab = app.add_subcommand("ablate", "Train the four regularizer arms of a TIPS model");
  add_shared(ab, abl_o);
  add_train_flags(ab, abl_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (gen->parsed()) {
      RunConfig c = gen_o.resolve();
      if (gen_o.values.count("seed")) c.synthetic.seed = c.seed;
      if (!gen_o.values.count("out") && gen_o.config_path.empty()) c.out_dir = "data";
      return cmd_gen_data(c);
    }
    if (tr->parsed()) return cmd_train(train_o.resolve());
    if (ev->parsed()) return cmd_eval(eval_o, eval_ckpt);
    if (ms->parsed()) return cmd_msb(msb_o, msb_ckpt);
    if (co->parsed()) return cmd_correlate(corr_o.resolve(), pools, layers);
    if (ab->parsed()) return cmd_ablate(abl_o.resolve());
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
