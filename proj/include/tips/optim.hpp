#pragma once

#include <stdexcept>
#include <vector>

#include "tips/autodiff.hpp"

namespace tips {

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
template <typename T>
struct SgdState {
  T lr = T(0.05);
  T momentum = T(0.9);
  T weight_decay = T(1e-4);
  std::vector<Tensor<T>> velocity;

  SgdState() = default;
  SgdState(T lr_, T momentum_, T weight_decay_) : lr(lr_), momentum(momentum_), weight_decay(weight_decay_) {
    if (!(lr_ >= T(0))) throw std::invalid_argument("sgd: lr must be >= 0");
    if (momentum_ < T(0) || momentum_ >= T(1)) throw std::invalid_argument("sgd: momentum must be in [0,1)");
    if (weight_decay_ < T(0)) throw std::invalid_argument("sgd: weight_decay must be >= 0");
  }
};

/**
 * v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
 * Gradients are cleared afterwards. Velocities are created zero-filled on
 * first use, one per parameter in list order.
 */
template <typename T>
void sgd_step(std::vector<Var<T>>& params, SgdState<T>& state) {
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (const auto& p : params) state.velocity.emplace_back(p.shape(), T(0));
  }
  if (state.velocity.size() != params.size()) {
    throw std::invalid_argument("sgd_step: parameter list changed size between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].requires_grad() && !params[i].grad()) {
      throw GraphError("sgd_step: parameter " + std::to_string(i) + " has no gradient; run backward() first");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.requires_grad()) continue;
    Tensor<T>& v = state.velocity[i];
    Tensor<T>& w = p.mutable_value();
    const Tensor<T>& g = *p.grad();
    require_same_shape(v, w, "sgd velocity");
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = state.momentum * v[j] + g[j] + state.weight_decay * w[j];
      w[j] -= state.lr * v[j];
    }
    p.zero_grad();
  }
}

}  // namespace tips
