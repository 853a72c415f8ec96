#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace tips;
using namespace tips::testing;

namespace {

// Direct evaluation of the cross-correlation formula.
TensorD naive_conv(const TensorD& x, const TensorD& w, const TensorD& b, std::size_t stride, std::size_t pad,
                   PaddingMode mode) {
  const long n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const long o = w.dim(0), k = w.dim(2);
  const long oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  TensorD out({std::size_t(n), std::size_t(o), std::size_t(oh), std::size_t(ow)});
  auto px = [&](long bb, long cc, long y, long xx) -> double {
    y -= pad;
    xx -= pad;
    if (mode == PaddingMode::circular) {
      y = ((y % h) + h) % h;
      xx = ((xx % wd) + wd) % wd;
    } else if (y < 0 || y >= h || xx < 0 || xx >= wd) {
      return 0.0;
    }
    return x.at(bb, cc, y, xx);
  };
  for (long bb = 0; bb < n; ++bb)
    for (long oo = 0; oo < o; ++oo)
      for (long i = 0; i < oh; ++i)
        for (long j = 0; j < ow; ++j) {
          double acc = b[oo];
          for (long cc = 0; cc < c; ++cc)
            for (long m = 0; m < k; ++m)
              for (long q = 0; q < k; ++q) acc += w.at(oo, cc, m, q) * px(bb, cc, i * stride + m, j * stride + q);
          out.at(bb, oo, i, j) = acc;
        }
  return out;
}

VarD conv(const TensorD& x, const TensorD& w, PaddingMode mode, std::size_t stride = 1) {
  return conv2d(VarD::constant(x), VarD::constant(w), VarD::constant(TensorD({w.dim(0)}, 0.0)),
                ConvSpec{stride, (w.dim(2) - 1) / 2, mode});
}

}  // namespace

TEST(Conv2d, CountingExamples) {
  const TensorD ones({1, 1, 3, 3}, 1.0), k({1, 1, 3, 3}, 1.0);
  const auto z = conv(ones, k, PaddingMode::zero).value();
  EXPECT_EQ(z.at(0, 0, 1, 1), 9.0);
  EXPECT_EQ(z.at(0, 0, 0, 0), 4.0);
  const auto c = conv(ones, k, PaddingMode::circular).value();
  for (double v : c.data()) EXPECT_EQ(v, 9.0);
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(3);
  const auto x = random_tensor({2, 1, 5, 7}, rng);
  TensorD id({1, 1, 3, 3}, 0.0);
  id.at(0, 0, 1, 1) = 1.0;
  for (auto mode : {PaddingMode::zero, PaddingMode::circular}) EXPECT_EQ(conv(x, id, mode).value(), x);
}

TEST(Conv2d, MatchesNaiveOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t c = 1 + rng.below(3), o = 1 + rng.below(4), k = rng.below(2) ? 3 : 5;
    const std::size_t h = k + rng.below(5), w = k + rng.below(5), stride = 1 + rng.below(2);
    const auto mode = rng.below(2) ? PaddingMode::zero : PaddingMode::circular;
    const auto x = random_tensor({2, c, h, w}, rng), wt = random_tensor({o, c, k, k}, rng), b = random_tensor({o}, rng);
    const auto got = conv2d(VarD::constant(x), VarD::constant(wt), VarD::constant(b), ConvSpec{stride, (k - 1) / 2, mode});
    const auto want = naive_conv(x, wt, b, stride, (k - 1) / 2, mode);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LT(max_abs_diff(got.value(), want), 1e-12) << "trial " << trial;
  }
}

TEST(Conv2d, ChannelMismatchRejected) {
  EXPECT_THROW(conv(TensorD({1, 2, 4, 4}), TensorD({1, 3, 3, 3}), PaddingMode::zero), ShapeError);
}

TEST(Conv2d, SamePaddingPreservesShape) {
  const auto y = conv(TensorD({2, 3, 7, 5}, 1.0), TensorD({4, 3, 3, 3}, 0.5), PaddingMode::zero);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 7, 5}));
}

TEST(Conv2d, CircularShiftEquivariance) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor({1, 2, 8, 6}, rng), w = random_tensor({3, 2, 3, 3}, rng);
    const long a = static_cast<long>(rng.below(8)), b = static_cast<long>(rng.below(6));
    const auto lhs = conv(circular_shift(x, a, b), w, PaddingMode::circular).value();
    const auto rhs = circular_shift(conv(x, w, PaddingMode::circular).value(), a, b);
    EXPECT_EQ(lhs, rhs);
  }
}

TEST(Conv2d, Gradient) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const auto mode = trial % 2 ? PaddingMode::zero : PaddingMode::circular;
    const std::size_t stride = 1 + trial % 3 / 2;
    const auto x = random_tensor({2, 2, 5, 4}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    const auto seed = rng.next();
    const double err = grad_check(
        [&](auto v) { return project(conv2d(v[0], v[1], v[2], ConvSpec{stride, 1, mode}), seed); }, {x, w, b});
    ASSERT_LT(err, 1e-4) << "trial " << trial;
  }
}

TEST(Linear, ValueAndGradient) {
  const auto y = linear(VarD::constant(TensorD({1, 2}, std::vector<double>{1, 2})),
                        VarD::constant(TensorD({2, 2}, std::vector<double>{1, 0, 3, 4})),
                        VarD::constant(TensorD::vector({0.5, -1})));
  EXPECT_EQ(y.value(), TensorD({1, 2}, std::vector<double>{1.5, 10}));
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto seed = rng.next();
    ASSERT_LT(grad_check([&](auto v) { return project(linear(v[0], v[1], v[2]), seed); },
                         {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5}, rng)}),
              1e-4);
  }
  EXPECT_THROW(linear(VarD::constant(TensorD({1, 3})), VarD::constant(TensorD({2, 2})), VarD::constant(TensorD({2}))),
               ShapeError);
}

TEST(GlobalAvgPool, Examples) {
  EXPECT_EQ(global_avg_pool(TensorD({1, 3, 4, 4}, 7.0)), TensorD({1, 3}, 7.0));
  EXPECT_EQ(global_avg_pool(TensorD({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}))[0], 2.5);
  Rng rng(9);
  const auto x = random_tensor({2, 3, 6, 6}, rng);
  for (long a = 0; a < 6; ++a)
    for (long b = 0; b < 6; ++b) EXPECT_NEAR(max_abs_diff(global_avg_pool(circular_shift(x, a, b)), global_avg_pool(x)), 0.0, 1e-15);
  for (int trial = 0; trial < 100; ++trial) {
    const auto seed = rng.next();
    ASSERT_LT(grad_check([&](auto v) { return project(global_avg_pool(v[0]), seed); }, {random_tensor({2, 3, 3, 5}, rng)}),
              1e-4);
  }
}

TEST(Softmax, Examples) {
  EXPECT_EQ(softmax(TensorD({1, 4}, 0.0)), TensorD({1, 4}, 0.25));
  const auto big = softmax(TensorD({1, 2}, std::vector<double>{1000, 0}));
  EXPECT_TRUE(std::isfinite(big[0]) && std::isfinite(big[1]));
  EXPECT_NEAR(big[0], 1.0, 1e-12);
  Rng rng(2);
  const auto v = random_tensor({3, 5}, rng, -4, 4);
  EXPECT_LT(max_abs_diff(softmax(v), softmax(map(v, [](double x) { return x + 5; }))), 1e-15);
  const auto p = softmax(v);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_GT(p[r * 5 + j], 0.0);
      EXPECT_LT(p[r * 5 + j], 1.0);
      s += p[r * 5 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
  for (int trial = 0; trial < 100; ++trial) {
    const auto seed = rng.next();
    ASSERT_LT(grad_check([&](auto vv) { return project(softmax(vv[0]), seed); }, {random_tensor({2, 4}, rng, -3, 3)}), 1e-4);
  }
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(VarD::constant(TensorD({1, 4}, 0.0)), {2}).value().item(), std::log(4.0), 1e-12);
  EXPECT_LT(cross_entropy(VarD::constant(TensorD({1, 2}, std::vector<double>{60, 0})), {0}).value().item(), 1e-20);
  auto logits = VarD::parameter(TensorD({1, 2}, 0.0));
  backward(cross_entropy(logits, {0}));
  EXPECT_NEAR((*logits.grad())[0], -0.5, 1e-15);
  EXPECT_NEAR((*logits.grad())[1], 0.5, 1e-15);
  EXPECT_THROW(cross_entropy(VarD::constant(TensorD({1, 2})), {2}), std::out_of_range);
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::size_t> labels{rng.below(4), rng.below(4), rng.below(4)};
    ASSERT_LT(grad_check([&](auto v) { return cross_entropy(v[0], labels); }, {random_tensor({3, 4}, rng, -3, 3)}), 1e-4);
  }
}

TEST(ArgmaxRows, LowestIndexWinsTies) {
  const auto p = argmax_rows(TensorD({2, 3}, std::vector<double>{1, 3, 3, 0, 0, 0}));
  EXPECT_EQ(p, (std::vector<std::size_t>{1, 0}));
}

TEST(BatchNorm, TrainModeNormalizesAndUpdatesRunningStats) {
  auto bn = make_batch_norm<double>(2);
  Rng rng(12);
  const auto x = random_tensor({4, 2, 3, 3}, rng, 0, 5);
  const auto y = batch_norm(VarD::constant(x), bn, true).value();
  for (std::size_t k = 0; k < 2; ++k) {
    double m = 0, v = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 9; ++i) m += y[(b * 2 + k) * 9 + i];
    m /= 36;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 9; ++i) v += std::pow(y[(b * 2 + k) * 9 + i] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 36, 1.0, 1e-3);
  }
  EXPECT_NE((*bn.running_mean)[0], 0.0);
  EXPECT_NE((*bn.running_var)[0], 1.0);
}

TEST(BatchNorm, EvalModeIsPerChannelAffine) {
  auto bn = make_batch_norm<double>(1);
  (*bn.running_mean)[0] = 2.0;
  (*bn.running_var)[0] = 4.0 - 1e-5;
  const auto y = batch_norm(VarD::constant(TensorD({1, 1, 1, 2}, std::vector<double>{2, 6})), bn, false).value();
  EXPECT_NEAR(y[0], 0.0, 1e-12);
  EXPECT_NEAR(y[1], 2.0, 1e-12);
}

TEST(BatchNorm, Gradients) {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    auto bn = make_batch_norm<double>(2);
    const bool training = trial % 2 == 0;
    const auto seed = rng.next();
    const auto x = random_tensor({3, 2, 2, 3}, rng);
    const auto g = random_tensor({2}, rng, 0.5, 1.5), b = random_tensor({2}, rng);
    const double err = grad_check(
        [&](auto v) {
          BatchNormParams<double> p = bn;
          p.gamma = v[1];
          p.beta = v[2];
          // Copies keep the running buffers fixed across probes.
          p.running_mean = std::make_shared<TensorD>(*bn.running_mean);
          p.running_var = std::make_shared<TensorD>(*bn.running_var);
          return project(batch_norm(v[0], p, training), seed);
        },
        {x, g, b});
    ASSERT_LT(err, 1e-4) << "trial " << trial << (training ? " train" : " eval");
  }
}

TEST(Backbone, CircularConvReluGapIsShiftInvariant) {
  Rng rng(14);
  auto c1 = make_conv<double>(1, 4, 3, PaddingMode::circular, rng);
  auto c2 = make_conv<double>(4, 4, 3, PaddingMode::circular, rng);
  auto net = [&](const TensorD& x) {
    return global_avg_pool(relu(conv2d(relu(conv2d(VarD::constant(x), c1)), c2))).value();
  };
  const auto x = random_tensor({1, 1, 8, 8}, rng);
  const auto base = net(x);
  for (long a = 0; a < 8; ++a)
    for (long b = 0; b < 8; ++b) EXPECT_LT(max_abs_diff(net(circular_shift(x, a, b)), base), 1e-12);
}
