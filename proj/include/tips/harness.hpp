#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "tips/checkpoint.hpp"
#include "tips/config.hpp"
#include "tips/data.hpp"
#include "tips/metrics.hpp"
#include "tips/model.hpp"
#include "tips/optim.hpp"
#include "tips/regularizers.hpp"

namespace tips {

/// Non-finite loss during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kUndoShiftFraction = 0.1;

/// Keeps large activation buffers in the heap instead of a fresh mmap per
/// allocation; training allocates many multi-megabyte tensors per step.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

inline std::string fmt(double v) { return detail::format_double(v); }
inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

template <typename T>
struct DataSplits {
  Dataset<T> train;
  Dataset<T> val;
  Dataset<T> test;
};

/// Loads the configured source and holds out the validation fraction of the
/// training set (selection drawn from the split stream).
template <typename T>
DataSplits<T> load_data(const RunConfig& cfg) {
  Dataset<T> train, test;
  if (cfg.data == DataSource::synthetic) {
    auto d = gen_synthetic<T>(cfg.synthetic);
    train = std::move(d.train);
    test = std::move(d.test);
  } else {
    train = load_idx<T>(cfg.train_images, cfg.train_labels);
    test = load_idx<T>(cfg.test_images, cfg.test_labels);
    const std::size_t k = std::max(train.num_classes, test.num_classes);
    train.num_classes = test.num_classes = k;
  }
  if (train.images.dim(1) != cfg.model.in_channels) {
    throw DataError("dataset has " + std::to_string(train.images.dim(1)) + " channels, model expects " +
                    std::to_string(cfg.model.in_channels));
  }
  if (train.num_classes > cfg.model.num_classes) {
    throw DataError("dataset has " + std::to_string(train.num_classes) + " classes, model has " +
                    std::to_string(cfg.model.num_classes));
  }
  DataSplits<T> out;
  const std::size_t n_val = static_cast<std::size_t>(std::floor(cfg.val_fraction * static_cast<double>(train.size())));
  if (n_val == 0) {
    out.train = std::move(train);
  } else {
    if (n_val >= train.size()) throw DataError("validation split leaves no training data");
    Rng rng = stream(cfg.seed, Stream::split);
    auto perm = permutation(train.size(), rng);
    std::vector<std::size_t> vi(perm.begin(), perm.begin() + static_cast<long>(n_val));
    std::vector<std::size_t> ti(perm.begin() + static_cast<long>(n_val), perm.end());
    std::sort(vi.begin(), vi.end());
    std::sort(ti.begin(), ti.end());
    out.val = subset(train, vi);
    out.train = subset(train, ti);
  }
  out.test = std::move(test);
  return out;
}

struct EpochLog {
  std::size_t epoch = 0;
  double l_task = 0;
  std::optional<double> l_fm;
  std::optional<double> l_undo;
  double train_acc = 0;
  std::optional<double> val_acc;
  /// Mean |psi(X) - X^t| over the epoch's batches (TIPS models only).
  std::optional<double> undo_gap;
};

template <typename T>
struct TrainResult {
  Model<T> model;
  std::vector<EpochLog> log;
  /// Epoch whose parameters the model holds (epochs when nothing was trained).
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  /// Task loss of the very first batch, before any update.
  std::optional<double> initial_loss;
  std::vector<std::string> warnings;
};

namespace detail {

/// Undo objective for one TIPS layer; also returns mean |psi - target|.
template <typename T>
std::pair<Var<T>, double> undo_term(const Model<T>& model, std::size_t layer, const Tensor<T>& x, UndoTarget target,
                                    Rng rng) {
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  std::vector<ShiftSpec> shifts(n);
  for (auto& s : shifts) {
    s.mode = ShiftMode::standard;
    s.dh = sample_shift_amount(h, kUndoShiftFraction, rng);
    s.dw = sample_shift_amount(w, kUndoShiftFraction, rng);
  }
  const auto& conv = model.undo_conv(layer);
  Var<T> loss;
  Tensor<T> goal;
  Var<T> psi_out;
  if (target == UndoTarget::shifted) {
    psi_out = apply_psi(Var<T>::constant(x), conv);
    goal = shift_batch(x, shifts);
    loss = mse_to(psi_out, goal);
  } else {
    psi_out = apply_psi(Var<T>::constant(shift_batch(x, shifts)), conv);
    goal = x;
    loss = mse_to(psi_out, goal);
  }
  double gap = 0;
  for (std::size_t i = 0; i < goal.size(); ++i) gap += std::abs(static_cast<double>(psi_out.value()[i] - goal[i]));
  return {loss, gap / static_cast<double>(goal.size())};
}

/// mean |psi - target| without recording; reuses the mixing trunk when it is the undo conv.
template <typename T>
double undo_gap(const Model<T>& model, const typename Model<T>::TipsTrace& t, UndoTarget target, Rng rng) {
  NoGradGuard guard;
  if (target != UndoTarget::shifted || !model.config().shared_psi) {
    return undo_term(model, t.layer, t.input.value(), target, rng).second;
  }
  const Tensor<T>& x = t.input.value();
  std::vector<ShiftSpec> shifts(x.dim(0));
  for (auto& s : shifts) {
    s.dh = sample_shift_amount(x.dim(2), kUndoShiftFraction, rng);
    s.dw = sample_shift_amount(x.dim(3), kUndoShiftFraction, rng);
  }
  const Tensor<T> goal = shift_batch(x, shifts);
  const Tensor<T>& psi = t.psi_out.value();
  double gap = 0;
  for (std::size_t i = 0; i < goal.size(); ++i) gap += std::abs(static_cast<double>(psi[i] - goal[i]));
  return gap / static_cast<double>(goal.size());
}

}  // namespace detail

/// Called after every epoch; returning false aborts training.
using EpochCallback = std::function<bool(const EpochLog&)>;

/**
 * Mini-batch SGD with the staged objective. TIPS models get L_FM every step
 * and L_undo from epoch ceil(eps * N); other models train on the task loss.
 * Early stopping watches validation accuracy; best-epoch selection and the
 * patience counter only consider epochs at or after the undo switch, and the
 * best parameters are restored at the end.
 */
template <typename T>
TrainResult<T> train(const RunConfig& cfg, const DataSplits<T>& data, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  TrainResult<T> r{Model<T>(cfg.model, cfg.seed), {}, 0, false, std::nullopt, {}};
  Model<T>& model = r.model;
  const bool tips = model.is_tips();
  const bool use_fm = tips && cfg.use_fm;
  const bool use_undo = tips && cfg.use_undo && cfg.alpha > 0;
  if (!tips && cfg.alpha > 0) {
    r.warnings.push_back(std::string("alpha > 0 has no effect for ") + to_string(cfg.model.pool) +
                         " pooling; undo and failure-mode terms are skipped");
  }
  auto params = model.parameters();
  SgdState<T> opt(static_cast<T>(cfg.lr), static_cast<T>(cfg.momentum), static_cast<T>(cfg.weight_decay));
  const std::size_t start = cfg.schedule(0).undo_start();
  const std::size_t select_from = use_undo && start < cfg.epochs ? start : 0;
  std::optional<double> best_acc;
  std::vector<Tensor<T>> best = model.snapshot();
  r.best_epoch = cfg.epochs;
  ModelPredictor<T> predict{model};
  const Rng batch_seeds = stream(cfg.seed, Stream::batches);
  const Rng undo_seeds = stream(cfg.seed, Stream::undo);
  std::uint64_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    LossSchedule sched = cfg.schedule(epoch);
    if (!use_undo) sched.epsilon = 1.0;
    const bool undo_now = use_undo && sched.undo_active();
    EpochLog log;
    log.epoch = epoch;
    double task_sum = 0, fm_sum = 0, undo_sum = 0, gap_sum = 0;
    std::size_t seen = 0, correct = 0, nb = 0;
    auto it = batches(data.train, cfg.batch_size, batch_seeds.split(epoch).next(), true);
    Batch<T> b;
    while (it.next(b)) {
      const auto fwd = model.forward(b.images, false, true);
      Var<T> l_task = cross_entropy(fwd.logits, b.labels);
      if (!r.initial_loss) r.initial_loss = l_task.value().item();
      std::optional<Var<T>> l_fm, l_undo;
      double gap = 0;
      if (use_fm) {
        std::vector<Var<T>> taus;
        std::vector<std::size_t> strides;
        for (const auto& t : fwd.tips) {
          taus.push_back(t.tau);
          strides.push_back(model.config().stride);
        }
        l_fm = loss_fm(taus, strides);
      }
      if (tips) {
        const Rng layer_seeds = undo_seeds.split(step);
        std::vector<Var<T>> terms;
        for (const auto& t : fwd.tips) {
          if (undo_now) {
            auto [loss, g] = detail::undo_term(model, t.layer, t.input.value(), cfg.undo_target, layer_seeds.split(t.layer));
            terms.push_back(loss);
            gap += g;
          } else {
            gap += detail::undo_gap(model, t, cfg.undo_target, layer_seeds.split(t.layer));
          }
        }
        gap /= static_cast<double>(fwd.tips.size());
        if (undo_now) {
          std::vector<T> weights(terms.size(), T(1) / static_cast<T>(terms.size()));
          l_undo = weighted_sum(terms, weights);
        }
      }
      const LossReport<T> rep = total_loss(l_task, l_fm, l_undo, sched);
      const double total = rep.total.value().item();
      if (!std::isfinite(total)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      }
      backward(rep.total);
      sgd_step(params, opt);

      const auto pred = argmax_rows(fwd.logits.value());
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
      const double nbatch = static_cast<double>(pred.size());
      seen += pred.size();
      task_sum += rep.l_task * nbatch;
      if (rep.l_fm) fm_sum += *rep.l_fm * nbatch;
      if (rep.l_undo) undo_sum += *rep.l_undo * nbatch;
      gap_sum += gap * nbatch;
      ++nb;
      ++step;
    }
    const double n = static_cast<double>(seen);
    log.l_task = task_sum / n;
    if (use_fm) log.l_fm = fm_sum / n;
    if (undo_now) log.l_undo = undo_sum / n;
    if (tips) log.undo_gap = gap_sum / n;
    log.train_acc = static_cast<double>(correct) / n;
    if (data.val.size() > 0) log.val_acc = accuracy(predict, data.val.images, data.val.labels);
    r.log.push_back(log);

    if (epoch >= select_from) {
      const double acc = log.val_acc.value_or(log.train_acc);
      if (!best_acc || acc > *best_acc || data.val.size() == 0) {
        best_acc = acc;
        best = model.snapshot();
        r.best_epoch = epoch;
      } else if (cfg.patience > 0 && epoch - r.best_epoch >= cfg.patience) {
        r.stopped_early = true;
      }
    }
    if (on_epoch && !on_epoch(log)) break;
    if (r.stopped_early) break;
  }
  if (best_acc) model.restore(best);
  return r;
}

// ---------------------------------------------------------------------------
// Reports.

inline constexpr const char* kTrainLogSchema = "tips-train-log/1";
inline constexpr const char* kMetricsSchema = "tips-metrics/1";
inline constexpr const char* kCurvesSchema = "tips-curves/1";
inline constexpr const char* kCorrelationSchema = "tips-correlation/1";
inline constexpr const char* kPearsonSchema = "tips-pearson/1";
inline constexpr const char* kAblationSchema = "tips-ablation/1";

inline std::string report_header(const char* schema, const RunConfig& cfg) {
  return std::string("# schema=") + schema + " config_digest=" + config_digest(cfg) + " seed=" + std::to_string(cfg.seed) +
         "\n";
}

inline std::string train_log_csv(const RunConfig& cfg, const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << report_header(kTrainLogSchema, cfg);
  os << "epoch,l_task,l_fm,l_undo,train_acc,val_acc,undo_gap\n";
  for (const auto& e : log) {
    os << e.epoch << ',' << fmt(e.l_task) << ',' << fmt(e.l_fm) << ',' << fmt(e.l_undo) << ',' << fmt(e.train_acc) << ','
       << fmt(e.val_acc) << ',' << fmt(e.undo_gap) << '\n';
  }
  return os.str();
}

inline std::string metrics_csv(const RunConfig& cfg, const MetricsReport& m) {
  std::ostringstream os;
  os << report_header(kMetricsSchema, cfg);
  os << "metric,value\n";
  auto row = [&](const std::string& k, const std::string& v) { os << k << ',' << v << '\n'; };
  row("n_images", std::to_string(m.n_images));
  row("pairs_per_image", std::to_string(m.pairs_per_image));
  row("eval_seed", std::to_string(m.seed));
  row("accuracy", fmt(m.accuracy));
  row("standard_consistency", fmt(m.standard.consistency));
  row("standard_fidelity", fmt(m.standard.fidelity));
  row("circular_consistency", fmt(m.circular.consistency));
  row("circular_fidelity", fmt(m.circular.fidelity));
  row("msb", m.msb.msb ? fmt(*m.msb.msb) : "not_applicable");
  for (std::size_t l = 0; l < m.msb.per_layer.size(); ++l) row("msb_layer" + std::to_string(l), fmt(m.msb.per_layer[l]));
  for (const auto& p : m.patches) {
    row("patch" + std::to_string(p.patch_size) + "_consistency", fmt(p.consistency));
    row("patch" + std::to_string(p.patch_size) + "_fidelity", fmt(p.fidelity));
  }
  return os.str();
}

inline std::string curves_csv(const RunConfig& cfg, const MetricsReport& m) {
  std::ostringstream os;
  os << report_header(kCurvesSchema, cfg);
  os << "mode,shift,agreement\n";
  for (std::size_t d = 0; d < m.standard_curve.size(); ++d) os << "standard," << d << ',' << fmt(m.standard_curve[d]) << '\n';
  for (std::size_t d = 0; d < m.circular_curve.size(); ++d) os << "circular," << d << ',' << fmt(m.circular_curve[d]) << '\n';
  return os.str();
}

inline std::string summary_text(const MetricsReport& m) {
  std::ostringstream os;
  auto pct = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return std::string(buf);
  };
  os << "images " << m.n_images << ", pairs/image " << m.pairs_per_image << ", eval seed " << m.seed << '\n';
  os << "accuracy              " << pct(m.accuracy) << '\n';
  os << "standard consistency  " << pct(m.standard.consistency) << "   fidelity " << pct(m.standard.fidelity) << '\n';
  os << "circular consistency  " << pct(m.circular.consistency) << "   fidelity " << pct(m.circular.fidelity) << '\n';
  os << "msb                   " << (m.msb.msb ? pct(*m.msb.msb) : std::string("n/a (no pooling layers)")) << '\n';
  for (const auto& p : m.patches) {
    os << "patch " << p.patch_size << "             consistency " << pct(p.consistency) << "   fidelity "
       << pct(p.fidelity) << '\n';
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline ShiftSampler eval_sampler(const RunConfig& cfg) {
  ShiftSampler s = cfg.eval_sampler;
  s.seed = cfg.seed;
  return s;
}

template <typename T>
MetricsReport evaluate(const RunConfig& cfg, const Model<T>& model, const Dataset<T>& test) {
  return evaluate_model(model, test.images, test.labels, eval_sampler(cfg), cfg.patch_sizes, cfg.shift_mode);
}

// ---------------------------------------------------------------------------
// Correlation study.

struct CorrelationRecord {
  std::string digest;
  std::string pool;
  std::size_t layers = 0;
  std::size_t lpf = 0;
  std::string dataset;
  std::optional<double> msb;
  double standard_consistency = 0;
  double standard_fidelity = 0;
  double circular_consistency = 0;
  double circular_fidelity = 0;
  double accuracy = 0;
};

struct PearsonResult {
  std::string pair;
  std::optional<double> r;
  std::size_t points = 0;
  std::string note;
};

struct CorrelationTable {
  std::vector<CorrelationRecord> records;
  std::vector<PearsonResult> pearson;
};

inline std::vector<PearsonResult> correlation_stats(const std::vector<CorrelationRecord>& records) {
  std::vector<double> msb, sc, cc, acc;
  for (const auto& r : records) {
    if (!r.msb) continue;
    msb.push_back(*r.msb);
    sc.push_back(r.standard_consistency);
    cc.push_back(r.circular_consistency);
    acc.push_back(r.accuracy);
  }
  std::vector<PearsonResult> out;
  auto one = [&](const std::string& name, const std::vector<double>& ys) {
    PearsonResult p{name, std::nullopt, msb.size(), ""};
    try {
      p.r = pearson_r(msb, ys);
    } catch (const MetricError& e) {
      p.note = e.what();
    }
    out.push_back(p);
  };
  one("msb~standard_consistency", sc);
  one("msb~circular_consistency", cc);
  one("msb~accuracy", acc);
  return out;
}

/// Called with each finished cell (in grid order).
using CellCallback = std::function<void(const RunConfig&, const CorrelationRecord&)>;

/**
 * Trains and evaluates every grid cell; records are sorted by config digest.
 * Cells without pooling layers keep their invariance metrics but have no MSB
 * and are left out of the correlations.
 */
template <typename T>
CorrelationTable correlate(const std::vector<RunConfig>& grid, const CellCallback& on_cell = {}) {
  if (grid.size() < 2) throw ConfigError("correlate: need at least two configurations");
  CorrelationTable t;
  for (const auto& cfg : grid) {
    const auto data = load_data<T>(cfg);
    auto trained = train(cfg, data);
    const MetricsReport m = evaluate(cfg, trained.model, data.test);
    CorrelationRecord rec{config_digest(cfg),
                          to_string(cfg.model.pool),
                          cfg.model.num_pooling_layers,
                          cfg.model.lpf,
                          data.train.provenance,
                          m.msb.msb,
                          m.standard.consistency,
                          m.standard.fidelity,
                          m.circular.consistency,
                          m.circular.fidelity,
                          m.accuracy};
    if (on_cell) on_cell(cfg, rec);
    t.records.push_back(rec);
  }
  std::sort(t.records.begin(), t.records.end(), [](const auto& a, const auto& b) { return a.digest < b.digest; });
  t.pearson = correlation_stats(t.records);
  return t;
}

/// Cartesian grid of pool kinds and pooling-layer counts over a base config.
/// "gap" ignores the layer counts and yields a single cell.
inline std::vector<RunConfig> make_grid(const RunConfig& base, const std::vector<std::string>& pools,
                                        const std::vector<std::size_t>& layer_counts) {
  std::vector<RunConfig> grid;
  for (const auto& p : pools) {
    RunConfig c = base;
    c.model.pool = parse_pool_kind(p);
    if (c.model.pool == PoolKind::gap_only) {
      c.model.num_pooling_layers = 0;
      c.model.lpf = 0;
      grid.push_back(c);
      continue;
    }
    if (c.model.pool == PoolKind::blur && c.model.lpf == 0) c.model.lpf = 3;
    if (c.model.pool == PoolKind::max || c.model.pool == PoolKind::avg) c.model.lpf = 0;
    for (std::size_t l : layer_counts) {
      c.model.num_pooling_layers = l;
      grid.push_back(c);
    }
  }
  return grid;
}

inline std::string correlation_csv(const RunConfig& base, const CorrelationTable& t) {
  std::ostringstream os;
  os << report_header(kCorrelationSchema, base);
  os << "digest,pool,layers,lpf,dataset,msb,standard_consistency,standard_fidelity,circular_consistency,"
        "circular_fidelity,accuracy\n";
  for (const auto& r : t.records) {
    os << r.digest << ',' << r.pool << ',' << r.layers << ',' << r.lpf << ',' << r.dataset << ','
       << (r.msb ? fmt(*r.msb) : "not_applicable") << ',' << fmt(r.standard_consistency) << ','
       << fmt(r.standard_fidelity) << ',' << fmt(r.circular_consistency) << ',' << fmt(r.circular_fidelity) << ','
       << fmt(r.accuracy) << '\n';
  }
  return os.str();
}

inline std::string pearson_csv(const RunConfig& base, const CorrelationTable& t) {
  std::ostringstream os;
  os << report_header(kPearsonSchema, base);
  os << "pair,points,r,note\n";
  for (const auto& p : t.pearson) os << p.pair << ',' << p.points << ',' << (p.r ? fmt(*p.r) : "undefined") << ',' << p.note << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Regularizer ablation.

struct AblationRow {
  std::string arm;
  bool use_fm = false;
  bool use_undo = false;
  double initial_loss = 0;
  double accuracy = 0;
  double standard_consistency = 0;
  double standard_fidelity = 0;
  double circular_consistency = 0;
  double msb = 0;
};

inline std::vector<std::pair<std::string, RunConfig>> ablation_arms(const RunConfig& base) {
  if (base.model.pool != PoolKind::tips) throw ConfigError("ablate requires tips pooling");
  std::vector<std::pair<std::string, RunConfig>> arms;
  const std::pair<bool, bool> flags[4] = {{false, false}, {true, false}, {false, true}, {true, true}};
  const char* names[4] = {"task_only", "fm", "undo", "both"};
  for (int i = 0; i < 4; ++i) {
    RunConfig c = base;
    c.use_fm = flags[i].first;
    c.use_undo = flags[i].second;
    arms.emplace_back(names[i], c);
  }
  return arms;
}

/// Trains the four arms from the same seed (hence the same initialization).
template <typename T>
std::vector<AblationRow> ablate(const RunConfig& base,
                                const std::function<void(const AblationRow&)>& on_arm = {}) {
  std::vector<AblationRow> rows;
  const auto data = load_data<T>(base);
  for (const auto& [name, cfg] : ablation_arms(base)) {
    auto trained = train(cfg, data);
    const MetricsReport m = evaluate(cfg, trained.model, data.test);
    AblationRow row{name,
                    cfg.use_fm,
                    cfg.use_undo,
                    trained.initial_loss.value_or(0.0),
                    m.accuracy,
                    m.standard.consistency,
                    m.standard.fidelity,
                    m.circular.consistency,
                    m.msb.msb.value_or(0.0)};
    if (on_arm) on_arm(row);
    rows.push_back(row);
  }
  return rows;
}

inline std::string ablation_csv(const RunConfig& base, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << report_header(kAblationSchema, base);
  os << "arm,use_fm,use_undo,initial_loss,accuracy,standard_consistency,standard_fidelity,circular_consistency,msb\n";
  for (const auto& r : rows) {
    os << r.arm << ',' << (r.use_fm ? 1 : 0) << ',' << (r.use_undo ? 1 : 0) << ',' << fmt(r.initial_loss) << ','
       << fmt(r.accuracy) << ',' << fmt(r.standard_consistency) << ',' << fmt(r.standard_fidelity) << ','
       << fmt(r.circular_consistency) << ',' << fmt(r.msb) << '\n';
  }
  return os.str();
}

}  // namespace tips
