// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance --criterion N [--workdir DIR]
//
// Exit status is 0 only when the criterion passes. Heavy criteria keep their
// training artifacts (train log, metrics) under DIR.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "../support.hpp"

using namespace tips;
using namespace tips::testing;
namespace fs = std::filesystem;

namespace {

using Real = float;
using Clock = std::chrono::steady_clock;

// Pinned tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr int kGradInstances = 100;
constexpr double kGradBudgetSec = 120;
constexpr double kAvgEquivTol = 1e-6;
constexpr int kAvgEquivMaps = 1000;
constexpr double kAvgMsbMax = 0.01;
constexpr double kCircularLogitTol = 1e-5;
constexpr int kCircularImages = 20;
constexpr double kTipsEquivTol = 1e-6;
constexpr double kHeadlineMinGain = 0.02;
constexpr double kHeadlineMaxAccLoss = 0.01;
constexpr double kHeadlineBudgetSec = 30 * 60;
constexpr double kCorrelationBudgetSec = 2 * 3600;
constexpr std::uint64_t kSeeds[3] = {0, 1, 2};

fs::path g_workdir = "acceptance_runs";

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

int report(int id, bool pass, const std::string& detail) {
  std::cout << "criterion " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
  return pass ? 0 : 1;
}

void note(const std::string& s) { std::cout << "  " << s << std::endl; }

// ---------------------------------------------------------------------------
// Shared training runs.

struct RunOutcome {
  std::vector<EpochLog> log;
  MetricsReport metrics;
  double seconds = 0;
};

RunOutcome train_and_eval(const RunConfig& cfg, const std::string& tag) {
  const auto t0 = Clock::now();
  const auto data = load_data<Real>(cfg);
  auto r = train(cfg, data);
  RunOutcome o;
  o.metrics = evaluate(cfg, r.model, data.test);
  o.log = r.log;
  o.seconds = seconds_since(t0);
  const fs::path dir = g_workdir / tag;
  write_text(dir / "config.txt", serialize_config(cfg));
  write_text(dir / "train_log.csv", train_log_csv(cfg, r.log));
  write_text(dir / "metrics.csv", metrics_csv(cfg, o.metrics));
  save_checkpoint(make_checkpoint(r.model, serialize_config(cfg, false), r.best_epoch), (dir / "model.ckpt").string());
  note(tag + ": acc " + num(o.metrics.accuracy) + "  std " + num(o.metrics.standard.consistency) + "  circ " +
       num(o.metrics.circular.consistency) + "  msb " + (o.metrics.msb.msb ? num(*o.metrics.msb.msb) : "n/a") + "  (" +
       num(o.seconds, 0) + " s)");
  return o;
}

RunConfig default_run(PoolKind pool, std::uint64_t seed) {
  RunConfig c;
  c.model.pool = pool;
  c.seed = seed;
  return c;
}

// Reduced desk-scale setup for the multi-model studies (criteria 6 and 7).
RunConfig study_run(PoolKind pool, std::uint64_t seed, std::size_t epochs) {
  RunConfig c = default_run(pool, seed);
  c.synthetic.n_train = 2000;
  c.synthetic.n_test = 500;
  c.epochs = epochs;
  return c;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness.

TensorD nonneg(Shape s, Rng& rng) { return random_tensor(std::move(s), rng, 0.05, 1.0); }

TipsParams<double> tips_params(std::size_t c, std::size_t s, Rng& rng) {
  auto p = make_tips<double>(c, s, PaddingMode::circular, rng);
  p.mix_weight.mutable_value() = random_tensor(p.mix_weight.shape(), rng, -1, 1);
  p.mix_bias.mutable_value() = random_tensor(p.mix_bias.shape(), rng, -0.5, 0.5);
  return p;
}

struct OpCase {
  std::string name;
  std::function<double(Rng&)> check;  // worst relative error of one random instance
};

std::vector<OpCase> op_cases() {
  std::vector<OpCase> v;
  auto add_case = [&](std::string n, std::function<double(Rng&)> f) { v.push_back({std::move(n), std::move(f)}); };
  const Shape s{2, 3, 4};
  add_case("add", [s](Rng& r) {
    const auto a = random_tensor(s, r), b = random_tensor(s, r);
    const auto k = r.next();
    return grad_check([&](auto x) { return project(add(x[0], x[1]), k); }, {a, b});
  });
  add_case("sub", [s](Rng& r) {
    const auto a = random_tensor(s, r), b = random_tensor(s, r);
    const auto k = r.next();
    return grad_check([&](auto x) { return project(sub(x[0], x[1]), k); }, {a, b});
  });
  add_case("mul", [s](Rng& r) {
    const auto a = random_tensor(s, r), b = random_tensor(s, r);
    const auto k = r.next();
    return grad_check([&](auto x) { return project(mul(x[0], x[1]), k); }, {a, b});
  });
  add_case("relu", [s](Rng& r) {
    const auto a = kink_free_tensor(s, r);
    const auto k = r.next();
    return grad_check([&](auto x) { return project(relu(x[0]), k); }, {a});
  });
  add_case("square", [s](Rng& r) {
    const auto a = random_tensor(s, r);
    const auto k = r.next();
    return grad_check([&](auto x) { return project(square(x[0]), k); }, {a});
  });
  add_case("scale", [s](Rng& r) {
    const auto a = random_tensor(s, r);
    const double c = r.uniform(-2, 2);
    const auto k = r.next();
    return grad_check([&](auto x) { return project(scale(x[0], c), k); }, {a});
  });
  add_case("scalar_mul", [s](Rng& r) {
    const auto a = random_tensor(s, r), c = random_tensor({1}, r);
    const auto k = r.next();
    return grad_check([&](auto x) { return project(scalar_mul(x[1], x[0]), k); }, {a, c});
  });
  add_case("sum+mean", [s](Rng& r) {
    const auto a = random_tensor(s, r);
    return grad_check([&](auto x) { return add(sum(square(x[0])), mean(x[0])); }, {a});
  });
  add_case("reshape", [s](Rng& r) {
    const auto a = random_tensor(s, r);
    const auto k = r.next();
    return grad_check([&](auto x) { return project(reshape(x[0], {6, 4}), k); }, {a});
  });
  add_case("mean_last", [s](Rng& r) {
    const auto a = random_tensor(s, r);
    const auto k = r.next();
    return grad_check([&](auto x) { return project(mean_last(x[0]), k); }, {a});
  });
  add_case("l2_norm_last", [s](Rng& r) {
    const auto a = kink_free_tensor(s, r);
    const auto k = r.next();
    return grad_check([&](auto x) { return project(l2_norm_last(x[0]), k); }, {a});
  });
  add_case("mse_to", [s](Rng& r) {
    const auto a = random_tensor(s, r), b = random_tensor(s, r);
    return grad_check([&](auto x) { return mse_to(x[0], b); }, {a});
  });
  add_case("weighted_sum", [s](Rng& r) {
    const auto a = random_tensor(s, r), b = random_tensor(s, r);
    const double w0 = r.uniform(-1, 1), w1 = r.uniform(-1, 1);
    return grad_check([&](auto x) { return weighted_sum<double>({mean(square(x[0])), sum(x[1])}, {w0, w1}); }, {a, b});
  });
  for (auto pad : {PaddingMode::circular, PaddingMode::zero}) {
    for (std::size_t stride : {1, 2}) {
      add_case(std::string("conv2d/") + to_string(pad) + "/s" + std::to_string(stride), [pad, stride](Rng& r) {
        const auto x = random_tensor({2, 2, 5, 6}, r), w = random_tensor({3, 2, 3, 3}, r), b = random_tensor({3}, r);
        const auto k = r.next();
        const ConvSpec spec{stride, 1, pad};
        return grad_check([&](auto v) { return project(conv2d(v[0], v[1], v[2], spec), k); }, {x, w, b});
      });
    }
  }
  add_case("batch_norm(train)", [](Rng& r) {
    const auto x = random_tensor({3, 2, 3, 3}, r), g = random_tensor({2}, r, 0.5, 1.5), b = random_tensor({2}, r);
    const auto k = r.next();
    return grad_check(
        [&](auto v) {
          auto p = make_batch_norm<double>(2);
          p.gamma = v[1];
          p.beta = v[2];
          return project(batch_norm(v[0], p, true), k);
        },
        {x, g, b});
  });
  add_case("linear", [](Rng& r) {
    const auto x = random_tensor({3, 4}, r), w = random_tensor({5, 4}, r), b = random_tensor({5}, r);
    const auto k = r.next();
    return grad_check([&](auto v) { return project(linear(v[0], v[1], v[2]), k); }, {x, w, b});
  });
  add_case("global_avg_pool", [](Rng& r) {
    const auto x = random_tensor({2, 3, 4, 5}, r);
    const auto k = r.next();
    return grad_check([&](auto v) { return project(global_avg_pool(v[0]), k); }, {x});
  });
  add_case("softmax", [](Rng& r) {
    const auto x = random_tensor({3, 5}, r, -3, 3);
    const auto k = r.next();
    return grad_check([&](auto v) { return project(softmax(v[0]), k); }, {x});
  });
  add_case("cross_entropy", [](Rng& r) {
    const auto x = random_tensor({4, 5}, r, -3, 3);
    std::vector<std::size_t> y;
    for (int i = 0; i < 4; ++i) y.push_back(r.below(5));
    return grad_check([&](auto v) { return cross_entropy(v[0], y); }, {x});
  });
  add_case("max_pool", [](Rng& r) {
    const auto x = random_tensor({2, 2, 5, 6}, r);
    const auto k = r.next();
    return grad_check([&](auto v) { return project(max_pool(v[0], 2), k); }, {x});
  });
  add_case("avg_pool", [](Rng& r) {
    const auto x = random_tensor({2, 2, 5, 6}, r);
    const auto k = r.next();
    return grad_check([&](auto v) { return project(avg_pool(v[0], 2), k); }, {x});
  });
  add_case("blur_pool", [](Rng& r) {
    const auto x = random_tensor({2, 2, 6, 6}, r);
    const auto k = r.next();
    const BlurSpec spec{r.below(2) ? 3u : 5u};
    return grad_check([&](auto v) { return project(blur_pool(v[0], spec, 2, PaddingMode::circular), k); }, {x});
  });
  add_case("aps_pool", [](Rng& r) {
    const auto x = random_tensor({2, 2, 6, 6}, r);
    const auto k = r.next();
    return grad_check([&](auto v) { return project(aps_pool(v[0], ApsSpec{}, 2), k); }, {x});
  });
  add_case("tips_pool", [](Rng& r) {
    const auto x = nonneg({2, 2, 6, 6}, r);
    const auto p0 = tips_params(2, 2, r);
    const auto k = r.next();
    return grad_check(
        [&](auto v) {
          auto p = p0;
          p.psi.weight = v[1];
          p.psi.bias = v[2];
          p.mix_weight = v[3];
          p.mix_bias = v[4];
          return project(tips_pool(v[0], p), k);
        },
        {x, p0.psi.weight.value(), p0.psi.bias.value(), p0.mix_weight.value(), p0.mix_bias.value()});
  });
  add_case("loss_fm", [](Rng& r) {
    const auto z = random_tensor({6, 4}, r, -3, 3);
    return grad_check([&](auto v) { return loss_fm<double>({reshape(softmax(v[0]), {2, 3, 4})}, {2}); }, {z});
  });
  add_case("loss_undo", [](Rng& r) {
    const auto x = random_tensor({2, 2, 5, 5}, r), psi = random_tensor({2, 2, 5, 5}, r);
    std::vector<ShiftSpec> sh(2);
    for (auto& q : sh) {
      q.dh = static_cast<long>(r.below(3)) - 1;
      q.dw = static_cast<long>(r.below(3)) - 1;
    }
    return grad_check([&](auto v) { return loss_undo(x, v[0], sh); }, {psi});
  });
  return v;
}

/**
 * Full TIPS network objective: (1 - a) * CE + a * L_undo + L_FM on a small
 * model. The undo target and its input are detached (stop-gradient), so the
 * finite-difference side holds the recorded pooling inputs fixed.
 */
double network_check(Rng& rng) {
  ModelConfig mc;
  mc.stages = {{3, 1}, {3, 1}};
  mc.pool = PoolKind::tips;
  mc.num_pooling_layers = 2;
  mc.shared_psi = rng.below(2) == 0;
  Model<double> model(mc, rng.next());
  for (auto t : model.tips_layers()) {
    t.mix_bias.mutable_value() = random_tensor(t.mix_bias.shape(), rng, -0.5, 0.5);
  }
  const TensorD x = random_tensor({3, 1, 8, 8}, rng, 0, 1);
  std::vector<std::size_t> y;
  for (int i = 0; i < 3; ++i) y.push_back(rng.below(4));
  const LossSchedule sched{rng.uniform(0.1, 0.9), 0.0, 10, 5};
  const Rng undo_rng(rng.next());

  std::vector<TensorD> pool_inputs;
  auto objective = [&](bool record) {
    const auto fwd = model.forward(x, false, true);
    std::vector<Var<double>> taus, undo;
    std::vector<std::size_t> strides;
    if (record) pool_inputs.clear();
    for (std::size_t l = 0; l < fwd.tips.size(); ++l) {
      const auto& t = fwd.tips[l];
      taus.push_back(t.tau);
      strides.push_back(2);
      if (record) pool_inputs.push_back(t.input.value());
      undo.push_back(detail::undo_term(model, t.layer, pool_inputs[l], UndoTarget::shifted, undo_rng.split(l)).first);
    }
    const auto l_undo = weighted_sum<double>(undo, std::vector<double>(undo.size(), 1.0 / double(undo.size())));
    return total_loss<double>(cross_entropy(fwd.logits, y), loss_fm(taus, strides), l_undo, sched).total;
  };

  auto params = model.parameters();
  backward(objective(true));
  double worst = 0;
  for (auto& p : params) {
    const TensorD analytic = p.grad() ? *p.grad() : TensorD(p.shape(), 0.0);
    TensorD numeric(p.shape());
    for (std::size_t i = 0; i < p.value().size(); ++i) {
      const double orig = p.value()[i];
      NoGradGuard guard;
      p.mutable_value()[i] = orig + 1e-6;
      const double up = objective(false).value().item();
      p.mutable_value()[i] = orig - 1e-6;
      const double down = objective(false).value().item();
      p.mutable_value()[i] = orig;
      numeric[i] = (up - down) / 2e-6;
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

int criterion_gradients() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_name;
  bool ok = true;
  std::size_t checked = 0;
  for (const auto& c : op_cases()) {
    Rng rng(std::hash<std::string>{}(c.name) & 0xffff);
    double op_worst = 0;
    for (int i = 0; i < kGradInstances; ++i) op_worst = std::max(op_worst, c.check(rng));
    checked += kGradInstances;
    if (op_worst >= kGradTol) {
      ok = false;
      note(c.name + ": worst relative error " + sci(op_worst));
    }
    if (op_worst > worst) {
      worst = op_worst;
      worst_name = c.name;
    }
  }
  Rng rng(77);
  double net_worst = 0;
  for (int i = 0; i < kGradInstances; ++i) net_worst = std::max(net_worst, network_check(rng));
  checked += kGradInstances;
  const double secs = seconds_since(t0);
  const bool pass = ok && net_worst < kGradTol && secs < kGradBudgetSec;
  return report(1, pass,
                std::to_string(checked) + " instances; worst op error " + sci(worst) + " (" + worst_name +
                    "); full network error " + sci(net_worst) + "; tol " + sci(kGradTol) + "; " + num(secs, 1) +
                    " s (budget " + num(kGradBudgetSec, 0) + " s)");
}

// ---------------------------------------------------------------------------
// 2. Uniform mixing equals average pooling.

int criterion_avg_equivalence() {
  Rng rng(2);
  double worst = 0;
  for (int i = 0; i < kAvgEquivMaps; ++i) {
    const std::size_t n = 1 + rng.below(3), c = 1 + rng.below(4), h = 2 + rng.below(15), w = 2 + rng.below(15);
    const auto x = random_tensor({n, c, h, w}, rng, -2, 2);
    auto p = make_tips<double>(c, 2, PaddingMode::circular, rng);
    p.mix_weight.mutable_value() = TensorD(p.mix_weight.shape(), 0.0);
    p.mix_bias.mutable_value() = TensorD(p.mix_bias.shape(), 0.0);
    const auto xv = VarD::constant(x);
    worst = std::max(worst, max_abs_diff(tips_pool(xv, p).value(), avg_pool(xv, 2).value()));
  }
  return report(2, worst <= kAvgEquivTol,
                std::to_string(kAvgEquivMaps) + " maps; max |tips(uniform) - avg| = " + sci(worst) + " (tol " +
                    sci(kAvgEquivTol) + ")");
}

// ---------------------------------------------------------------------------
// 3. MSB oracles.

int criterion_msb() {
  Rng rng(3);
  const auto x = random_tensor({64, 1, 32, 32}, rng, 0, 1);
  ModelConfig mc;
  mc.pool = PoolKind::max;
  mc.num_pooling_layers = 3;
  const auto max_msb = model_msb(Model<double>(mc, 1), x);
  mc.pool = PoolKind::avg;
  const auto avg_msb = model_msb(Model<double>(mc, 1), x);
  const bool pass = *max_msb.msb == 1.0 && *avg_msb.msb <= kAvgMsbMax;
  return report(3, pass,
                "max-pool model MSB " + num(*max_msb.msb, 6) + " (want exactly 1); avg-pool model MSB " +
                    num(*avg_msb.msb, 6) + " (want <= " + num(kAvgMsbMax, 2) + ")");
}

// ---------------------------------------------------------------------------
// 4. Circular invariance.

int criterion_circular() {
  Rng rng(4);
  ModelConfig mc;
  mc.pool = PoolKind::aps;
  mc.num_pooling_layers = 3;
  mc.padding = PaddingMode::circular;
  Model<double> aps(mc, 4);
  const auto x = random_tensor({static_cast<std::size_t>(kCircularImages), 1, 32, 32}, rng, 0, 1);
  const auto base = aps.logits(x);
  const auto base_pred = argmax_rows(base);
  double worst = 0;
  std::size_t agree = 0, total = 0;
  for (long a = 0; a < 32; ++a)
    for (long b = 0; b < 32; ++b) {
      const auto l = aps.logits(circular_shift(x, a, b));
      worst = std::max(worst, max_abs_diff(l, base));
      const auto p = argmax_rows(l);
      for (std::size_t i = 0; i < p.size(); ++i) agree += p[i] == base_pred[i];
      total += p.size();
    }
  ModelPredictor<double> predict{aps};
  const double cons = consistency(predict, x, ShiftSampler{0, 1.0 / 8, 5}, ShiftMode::circular);

  // TIPS layer: exact equivariance under stride-multiple circular shifts.
  double tips_worst = 0;
  for (int t = 0; t < 20; ++t) {
    const auto p = tips_params(3, 2, rng);
    const auto y = nonneg({2, 3, 16, 16}, rng);
    const auto out = tips_pool(VarD::constant(y), p).value();
    const long a = static_cast<long>(rng.below(8)), b = static_cast<long>(rng.below(8));
    const auto shifted = tips_pool(VarD::constant(circular_shift(y, 2 * a, 2 * b)), p).value();
    tips_worst = std::max(tips_worst, max_abs_diff(shifted, circular_shift(out, a, b)));
  }
  mc.pool = PoolKind::tips;
  Model<double> tips_model(mc, 4);
  ModelPredictor<double> tips_predict{tips_model};
  const double tips_cons = consistency(tips_predict, x, ShiftSampler{0, 1.0 / 8, 5}, ShiftMode::circular);

  const bool pass = worst <= kCircularLogitTol && agree == total && cons == 1.0 && tips_worst <= kTipsEquivTol;
  return report(4, pass,
                "APS: max logit change over all 1024 circular shifts of " + std::to_string(kCircularImages) +
                    " images " + sci(worst) + " (tol " + sci(kCircularLogitTol) + "), prediction agreement " +
                    num(100.0 * double(agree) / double(total), 2) + "%, sampled circular consistency " +
                    num(100.0 * cons, 2) + "%; TIPS stride-multiple equivariance error " + sci(tips_worst) + " (tol " +
                    sci(kTipsEquivTol) + "); untrained TIPS model circular consistency " + num(100.0 * tips_cons, 2) +
                    "% (reported only)");
}

// ---------------------------------------------------------------------------
// 5. Headline direction on the default synthetic task.

int criterion_headline() {
  const auto t0 = Clock::now();
  std::vector<double> max_cons, tips_cons, max_acc, tips_acc;
  for (std::uint64_t seed : kSeeds) {
    const auto m = train_and_eval(default_run(PoolKind::max, seed), "default_max_seed" + std::to_string(seed));
    const auto t = train_and_eval(default_run(PoolKind::tips, seed), "default_tips_seed" + std::to_string(seed));
    max_cons.push_back(m.metrics.standard.consistency);
    max_acc.push_back(m.metrics.accuracy);
    tips_cons.push_back(t.metrics.standard.consistency);
    tips_acc.push_back(t.metrics.accuracy);
  }
  const double secs = seconds_since(t0);
  const double gain = median3(tips_cons) - median3(max_cons);
  const double acc_loss = median3(max_acc) - median3(tips_acc);
  const bool direction = gain >= kHeadlineMinGain && acc_loss <= kHeadlineMaxAccLoss;
  const bool budget = secs < kHeadlineBudgetSec;
  return report(5, direction && budget,
                "median standard consistency max " + num(100 * median3(max_cons), 2) + " vs tips " +
                    num(100 * median3(tips_cons), 2) + " (gain " + num(100 * gain, 2) + ", need >= " +
                    num(100 * kHeadlineMinGain, 0) + "); median accuracy max " + num(100 * median3(max_acc), 2) +
                    " vs tips " + num(100 * median3(tips_acc), 2) + " (loss " + num(100 * acc_loss, 2) +
                    ", allow <= " + num(100 * kHeadlineMaxAccLoss, 0) + "); direction " + (direction ? "ok" : "NOT met") +
                    "; runtime " + num(secs / 60, 1) + " min (budget " + num(kHeadlineBudgetSec / 60, 0) + " min) " +
                    (budget ? "ok" : "EXCEEDED"));
}

// ---------------------------------------------------------------------------
// 6. MSB correlates negatively with shift consistency.

int criterion_correlation() {
  const auto t0 = Clock::now();
  const RunConfig base = study_run(PoolKind::max, 0, 10);
  const auto grid = make_grid(base, {"max", "avg", "blur", "aps", "tips"}, {1, 2, 3});
  const auto table = correlate<Real>(grid, [](const RunConfig& c, const CorrelationRecord& r) {
    note(std::string(to_string(c.model.pool)) + " x" + std::to_string(c.model.num_pooling_layers) + ": msb " +
         (r.msb ? num(*r.msb) : "n/a") + "  std " + num(r.standard_consistency) + "  circ " +
         num(r.circular_consistency) + "  acc " + num(r.accuracy));
  });
  write_text(g_workdir / "correlation" / "correlation.csv", correlation_csv(base, table));
  write_text(g_workdir / "correlation" / "pearson.csv", pearson_csv(base, table));
  const double secs = seconds_since(t0);
  const auto& rs = table.pearson[0];
  const auto& rc = table.pearson[1];
  const bool pass = grid.size() >= 12 && rs.r && rc.r && *rs.r < 0 && *rc.r < 0 && secs < kCorrelationBudgetSec;
  auto show = [](const PearsonResult& p) { return p.r ? num(*p.r, 3) : "undefined (" + p.note + ")"; };
  return report(6, pass,
                std::to_string(grid.size()) + " cells; r(MSB, standard consistency) = " + show(rs) +
                    ", r(MSB, circular consistency) = " + show(rc) + " (both need < 0); runtime " + num(secs / 60, 1) +
                    " min (budget " + num(kCorrelationBudgetSec / 60, 0) + " min)");
}

// ---------------------------------------------------------------------------
// 7. Regularizer ablation ordering.

int criterion_ablation() {
  std::map<std::string, std::vector<double>> msb, cons;
  std::vector<std::string> order;
  for (std::uint64_t seed : kSeeds) {
    const RunConfig base = study_run(PoolKind::tips, seed, 20);
    const auto rows = ablate<Real>(base, [seed](const AblationRow& r) {
      note("seed " + std::to_string(seed) + " " + r.arm + ": acc " + num(r.accuracy) + "  std " +
           num(r.standard_consistency) + "  msb " + num(r.msb));
    });
    write_text(g_workdir / "ablation" / ("ablation_seed" + std::to_string(seed) + ".csv"), ablation_csv(base, rows));
    for (const auto& r : rows) {
      if (msb.find(r.arm) == msb.end()) order.push_back(r.arm);
      msb[r.arm].push_back(r.msb);
      cons[r.arm].push_back(r.standard_consistency);
    }
  }
  std::string detail;
  std::string best_arm;
  double best = -1;
  for (const auto& a : order) {
    const double c = median3(cons[a]);
    detail += a + " msb " + num(median3(msb[a])) + " std " + num(c) + "; ";
    if (c > best) {
      best = c;
      best_arm = a;
    }
  }
  const bool fm_lower = median3(msb["fm"]) < median3(msb["task_only"]);
  bool both_highest = true;
  for (const auto& a : order)
    if (a != "both" && median3(cons[a]) >= median3(cons["both"])) both_highest = false;
  return report(7, fm_lower && both_highest,
                "medians over 3 seeds: " + detail + "+L_FM lowers MSB: " + (fm_lower ? "yes" : "NO") +
                    "; +both has highest standard consistency: " + (both_highest ? "yes" : "NO (best: " + best_arm + ")"));
}

// ---------------------------------------------------------------------------
// 8. Undo gap shrinks after L_undo switches on (default TIPS run).

std::vector<EpochLog> load_or_train_default_tips() {
  const RunConfig cfg = default_run(PoolKind::tips, kSeeds[0]);
  const fs::path log_path = g_workdir / "default_tips_seed0" / "train_log.csv";
  const fs::path cfg_path = g_workdir / "default_tips_seed0" / "config.txt";
  if (fs::exists(log_path) && fs::exists(cfg_path) &&
      config_digest(load_config(cfg_path.string())) == config_digest(cfg)) {
    std::ifstream in(log_path);
    std::string line;
    std::vector<EpochLog> log;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#' || line.rfind("epoch", 0) == 0) continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) f.push_back(cell);
      while (f.size() < 7) f.emplace_back();
      EpochLog e;
      e.epoch = std::stoul(f[0]);
      if (!f[3].empty()) e.l_undo = std::stod(f[3]);
      if (!f[6].empty()) e.undo_gap = std::stod(f[6]);
      log.push_back(e);
    }
    note("reusing " + log_path.string());
    return log;
  }
  return train_and_eval(cfg, "default_tips_seed0").log;
}

int criterion_undo_trend() {
  const auto log = load_or_train_default_tips();
  const RunConfig cfg = default_run(PoolKind::tips, kSeeds[0]);
  const std::size_t start = cfg.schedule(0).undo_start();
  const EpochLog* at_start = nullptr;
  for (const auto& e : log)
    if (e.epoch == start) at_start = &e;
  if (!at_start || !at_start->undo_gap || !log.back().undo_gap) {
    return report(8, false, "training log has no undo-gap entry at the switch epoch " + std::to_string(start));
  }
  const double g0 = *at_start->undo_gap, g1 = *log.back().undo_gap;
  return report(8, g1 < g0,
                "mean |psi(X) - X^t| at switch epoch " + std::to_string(start) + " = " + num(g0, 5) +
                    ", at final epoch " + std::to_string(log.back().epoch) + " = " + num(g1, 5));
}

// ---------------------------------------------------------------------------
// 9. Schedule switch.

RunConfig tiny_run() {
  RunConfig c;
  c.model.stages = {{4, 1}, {8, 1}};
  c.synthetic.n_train = 96;
  c.synthetic.n_test = 32;
  c.synthetic.image_size = 16;
  c.synthetic.min_scale = 2;
  c.synthetic.max_scale = 5;
  c.batch_size = 32;
  c.eval_sampler.pairs_per_image = 2;
  return c;
}

int criterion_schedule() {
  bool ok = true;
  std::string detail;
  for (double eps : {0.2, 0.4, 0.8}) {
    RunConfig c = tiny_run();
    c.epochs = 10;
    c.epsilon = eps;
    c.patience = 0;
    const auto r = train(c, load_data<Real>(c));
    const std::string csv = train_log_csv(c, r.log);
    const std::size_t want = static_cast<std::size_t>(std::ceil(eps * 10 - 1e-9));
    std::size_t first = r.log.size();
    bool consistent = r.log.size() == 10;
    for (const auto& e : r.log) {
      if (e.l_undo && first == r.log.size()) first = e.epoch;
      if (e.l_undo.has_value() != (e.epoch >= want)) consistent = false;
    }
    // The CSV leaves the l_undo cell empty exactly when the term is absent.
    std::stringstream ss(csv);
    std::string line;
    while (std::getline(ss, line)) {
      if (line.empty() || line[0] == '#' || line.rfind("epoch", 0) == 0) continue;
      std::vector<std::string> f;
      std::stringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) f.push_back(cell);
      if (f.size() < 4 || f[3].empty() != (std::stoul(f[0]) < want)) consistent = false;
    }
    ok = ok && consistent;
    detail += "eps " + num(eps, 1) + ": first L_undo epoch " + std::to_string(first) + " (want " +
              std::to_string(want) + ")" + (consistent ? "" : " MISMATCH") + "; ";
  }
  return report(9, ok, detail + "N = 10");
}

// ---------------------------------------------------------------------------
// 10. Determinism and formats.

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int criterion_determinism() {
  const fs::path dir = g_workdir / "determinism";
  fs::remove_all(dir);
  RunConfig c = tiny_run();
  c.epochs = 3;
  std::vector<std::string> ckpt, logs, metrics, curves;
  for (int run = 0; run < 2; ++run) {
    const auto data = load_data<Real>(c);
    const auto r = train(c, data);
    const auto m = evaluate(c, r.model, data.test);
    const fs::path d = dir / ("run" + std::to_string(run));
    fs::create_directories(d);
    save_checkpoint(make_checkpoint(r.model, serialize_config(c, false), r.best_epoch), (d / "model.ckpt").string());
    write_text(d / "train_log.csv", train_log_csv(c, r.log));
    write_text(d / "metrics.csv", metrics_csv(c, m));
    write_text(d / "curves.csv", curves_csv(c, m));
    ckpt.push_back(slurp(d / "model.ckpt"));
    logs.push_back(slurp(d / "train_log.csv"));
    metrics.push_back(slurp(d / "metrics.csv"));
    curves.push_back(slurp(d / "curves.csv"));
  }
  const bool same_runs = ckpt[0] == ckpt[1] && logs[0] == logs[1] && metrics[0] == metrics[1] && curves[0] == curves[1];

  // Checkpoint load/save and model round trip.
  const auto loaded = load_checkpoint((dir / "run0" / "model.ckpt").string());
  save_checkpoint(loaded, (dir / "resaved.ckpt").string());
  Model<Real> m(c.model, 12345);
  apply_checkpoint(m, loaded);
  const bool ckpt_round = slurp(dir / "resaved.ckpt") == ckpt[0] &&
                          encode_checkpoint(make_checkpoint(m, loaded.config_text, loaded.epoch)) == ckpt[0];

  // IDX: synthetic export, reload, re-export.
  const auto d = load_data<Real>(c).test;
  write_idx(d, (dir / "a-images.idx").string(), (dir / "a-labels.idx").string());
  const auto back = load_idx<Real>((dir / "a-images.idx").string(), (dir / "a-labels.idx").string());
  write_idx(back, (dir / "b-images.idx").string(), (dir / "b-labels.idx").string());
  const bool idx_round = slurp(dir / "a-images.idx") == slurp(dir / "b-images.idx") &&
                         slurp(dir / "a-labels.idx") == slurp(dir / "b-labels.idx") && back.images == d.images &&
                         back.labels == d.labels;

  return report(10, same_runs && ckpt_round && idx_round,
                std::string("repeat run artifacts byte-identical: ") + (same_runs ? "yes" : "NO") +
                    "; checkpoint load/save bitwise: " + (ckpt_round ? "yes" : "NO") +
                    "; IDX round trip byte-for-byte: " + (idx_round ? "yes" : "NO"));
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Acceptance criteria"};
  int criterion = 0;
  std::string workdir = g_workdir.string();
  app.add_option("--criterion", criterion, "Criterion number (1-10)")->required()->check(CLI::Range(1, 10));
  app.add_option("--workdir", workdir, "Directory for training artifacts");
  CLI11_PARSE(app, argc, argv);
  g_workdir = workdir;
  fs::create_directories(g_workdir);
  try {
    switch (criterion) {
      case 1: return criterion_gradients();
      case 2: return criterion_avg_equivalence();
      case 3: return criterion_msb();
      case 4: return criterion_circular();
      case 5: return criterion_headline();
      case 6: return criterion_correlation();
      case 7: return criterion_ablation();
      case 8: return criterion_undo_trend();
      case 9: return criterion_schedule();
      case 10: return criterion_determinism();
    }
  } catch (const std::exception& e) {
    return report(criterion, false, std::string("exception: ") + e.what());
  }
  return 1;
}
