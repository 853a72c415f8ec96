#pragma once

#include <functional>
#include <vector>

#include "tips/tips.hpp"

namespace tips::testing {

using D = double;
using VarD = Var<double>;
using TensorD = Tensor<double>;

inline TensorD random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero by at least `gap`, random sign.
inline TensorD kink_free_tensor(Shape shape, Rng& rng, double gap = 1e-3) {
  TensorD t(std::move(shape));
  for (auto& v : t.data()) {
    const double m = rng.uniform(gap, 1.0);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

/// Builds a scalar from leaf variables.
using ScalarFn = std::function<VarD(const std::vector<VarD>&)>;

/// Random linear read-out so that every output element carries a distinct weight.
inline VarD project(const VarD& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, VarD::constant(random_tensor(y.shape(), rng))));
}

/**
 * Worst relative error between reverse-mode and central-difference gradients
 * of f over all inputs.
 */
inline double grad_check(const ScalarFn& f, const std::vector<TensorD>& inputs, double eps = 1e-6) {
  std::vector<VarD> leaves;
  for (const auto& t : inputs) leaves.push_back(VarD::parameter(t));
  backward(f(leaves));
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto numeric = finite_diff_grad<double>(
        [&](const TensorD& probe) {
          NoGradGuard guard;
          std::vector<VarD> vs;
          for (std::size_t j = 0; j < inputs.size(); ++j) vs.push_back(VarD::constant(j == i ? probe : inputs[j]));
          return f(vs).value().item();
        },
        inputs[i], eps);
    const TensorD analytic = leaves[i].grad() ? *leaves[i].grad() : TensorD(inputs[i].shape(), 0.0);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

}  // namespace tips::testing
