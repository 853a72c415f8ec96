#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tips/autodiff.hpp"
#include "tips/shift.hpp"

namespace tips {

/**
 * Staged objective weights. The shift-undo term is switched on from epoch
 * ceil(epsilon * N) onwards; before that the task loss keeps full weight.
 */
struct LossSchedule {
  double alpha = 0.35;
  double epsilon = 0.4;
  std::size_t total_epochs = 40;
  std::size_t current_epoch = 0;

  /// First epoch with the undo term active: ceil(epsilon * N).
  std::size_t undo_start() const {
    // The slack absorbs representation error such as 0.7 * 10 = 7.000000000000001.
    return static_cast<std::size_t>(std::ceil(epsilon * static_cast<double>(total_epochs) - 1e-9));
  }

  bool undo_active() const { return current_epoch >= undo_start(); }

  void validate() const {
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("alpha must lie in [0,1]");
    if (epsilon < 0.0 || epsilon > 1.0) throw std::invalid_argument("epsilon must lie in [0,1]");
  }
};

template <typename T>
struct LossReport {
  Var<T> total;
  double l_task = 0;
  std::optional<double> l_fm;
  std::optional<double> l_undo;
};

/**
 * Failure-mode regularizer (1 - s^2) * ||tau_k||_2 per channel row; averaged
 * over samples and channels within a layer, then over layers.
 * Each tau is [..., s*s].
 */
template <typename T>
Var<T> loss_fm(const std::vector<Var<T>>& taus, const std::vector<std::size_t>& strides) {
  if (taus.empty() || taus.size() != strides.size()) throw std::invalid_argument("loss_fm: one stride per tau required");
  std::vector<Var<T>> per_layer;
  std::vector<T> weights;
  for (std::size_t l = 0; l < taus.size(); ++l) {
    const std::size_t ss = strides[l] * strides[l];
    if (taus[l].shape().back() != ss) {
      throw ShapeError("loss_fm: tau " + to_string(taus[l].shape()) + " does not end in s*s = " + std::to_string(ss));
    }
    per_layer.push_back(mean(l2_norm_last(taus[l])));
    weights.push_back(static_cast<T>((1.0 - static_cast<double>(ss)) / static_cast<double>(taus.size())));
  }
  return weighted_sum(per_layer, weights);
}

/// Target of the undo objective: which side of the pair is shifted.
enum class UndoTarget {
  /// psi(X) is pulled towards the standard-shifted X^t.
  shifted,
  /// psi(X^t) is pulled towards the unshifted X.
  unshifted,
};

/**
 * Mean squared error between psi_out and the per-sample standard shift of x.
 * x is a constant target; the gradient reaches psi_out only.
 */
template <typename T>
Var<T> loss_undo(const Tensor<T>& x, const Var<T>& psi_out, const std::vector<ShiftSpec>& shifts) {
  require_same_shape(x, psi_out.value(), "loss_undo");
  std::vector<ShiftSpec> standard = shifts;
  for (auto& s : standard) s.mode = ShiftMode::standard;
  return mse_to(psi_out, shift_batch(x, standard));
}

/**
 * total = L_task + L_FM before the switch epoch, and
 * (1 - alpha) L_task + alpha L_undo + L_FM from it on. L_FM is optional
 * (ablations); L_undo must be supplied exactly when the schedule says active.
 */
template <typename T>
LossReport<T> total_loss(const Var<T>& l_task, const std::optional<Var<T>>& l_fm, const std::optional<Var<T>>& l_undo,
                         const LossSchedule& sched) {
  sched.validate();
  const bool active = sched.undo_active();
  if (active != l_undo.has_value()) {
    throw std::invalid_argument(active ? "total_loss: undo term required at epoch " + std::to_string(sched.current_epoch)
                                       : "total_loss: undo term supplied before epoch " + std::to_string(sched.undo_start()));
  }
  std::vector<Var<T>> terms{l_task};
  std::vector<T> weights{active ? static_cast<T>(1.0 - sched.alpha) : T(1)};
  LossReport<T> report;
  report.l_task = l_task.value().item();
  if (active) {
    terms.push_back(*l_undo);
    weights.push_back(static_cast<T>(sched.alpha));
    report.l_undo = l_undo->value().item();
  }
  if (l_fm) {
    terms.push_back(*l_fm);
    weights.push_back(T(1));
    report.l_fm = l_fm->value().item();
  }
  report.total = weighted_sum(terms, weights);
  return report;
}

}  // namespace tips
