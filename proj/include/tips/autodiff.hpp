#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tips/tensor.hpp"

namespace tips {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Maps the upstream gradient to one optional contribution per parent.
template <typename T>
using BackwardFn = std::function<std::vector<std::optional<Tensor<T>>>(const Tensor<T>&)>;

namespace detail {
inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

template <typename T>
struct Node {
  Tensor<T> value;
  std::optional<Tensor<T>> grad;
  std::vector<NodePtr<T>> parents;
  BackwardFn<T> backward;
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t id = detail::next_node_id();

  bool is_leaf() const noexcept { return !backward; }
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() noexcept { return detail::grad_mode(); }

/// Handle to a node of the expression graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr<T> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  static Var parameter(Tensor<T> value) { return leaf(std::move(value), true); }

  static Var leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  const std::optional<Tensor<T>>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.reset(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool valid() const noexcept { return static_cast<bool>(node_); }
  const NodePtr<T>& node() const noexcept { return node_; }

  /// Same value, cut off from the graph.
  Var detach() const { return constant(node_->value); }

 private:
  NodePtr<T> node_;
};

/// True when an op over these operands will record a backward rule.
template <typename T>
bool records(const std::vector<Var<T>>& operands) {
  if (!grad_enabled()) return false;
  for (const auto& v : operands)
    if (v.requires_grad()) return true;
  return false;
}

/// Builds an interior node. Parents and the backward rule are dropped when
/// no parent requires a gradient or recording is disabled.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, BackwardFn<T> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs && grad_enabled()) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

enum class TraversalOrder {
  /// Decreasing creation id (parents are always created before consumers).
  by_id,
  /// Reverse post-order of a depth-first search from the root.
  depth_first,
};

/**
 * Reverse-mode sweep from a scalar root. Gradient contributions arriving at a
 * node are summed in a canonical order (consumer id, then operand slot), so
 * every valid traversal order yields bitwise-identical results. Leaf
 * gradients accumulate across sweeps; a graph can be swept only once.
 */
template <typename T>
void backward(const Var<T>& root, TraversalOrder order = TraversalOrder::by_id) {
  if (!root.valid()) throw GraphError("backward on an empty Var");
  if (root.value().size() != 1) {
    throw GraphError("backward requires a scalar root, got shape " + to_string(root.shape()));
  }
  const NodePtr<T>& start = root.node();
  if (!start->requires_grad) return;
  if (start->consumed) throw GraphError("graph already swept by backward(); re-run the forward pass");

  std::vector<Node<T>*> nodes;
  {
    std::unordered_map<Node<T>*, bool> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{start.get(), 0}};
    seen[start.get()] = true;
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[n->parents.size() - 1 - next].get();
        ++next;
        if (p->requires_grad && !seen[p]) {
          seen[p] = true;
          stack.emplace_back(p, 0);
        }
      } else {
        nodes.push_back(n);
        stack.pop_back();
      }
    }
  }
  if (order == TraversalOrder::by_id) {
    std::sort(nodes.begin(), nodes.end(), [](auto* a, auto* b) { return a->id > b->id; });
  } else {
    std::reverse(nodes.begin(), nodes.end());
  }

  struct Contribution {
    std::uint64_t consumer;
    std::size_t slot;
    Tensor<T> grad;
  };
  std::unordered_map<Node<T>*, std::vector<Contribution>> pending;
  pending[start.get()].push_back({~std::uint64_t{0}, 0, Tensor<T>(start->value.shape(), T(1))});

  for (Node<T>* n : nodes) {
    auto it = pending.find(n);
    if (it == pending.end()) continue;
    auto& contribs = it->second;
    std::sort(contribs.begin(), contribs.end(), [](const auto& a, const auto& b) {
      return a.consumer != b.consumer ? a.consumer > b.consumer : a.slot < b.slot;
    });
    Tensor<T> g = std::move(contribs.front().grad);
    for (std::size_t i = 1; i < contribs.size(); ++i) add_inplace(g, contribs[i].grad);
    pending.erase(it);

    if (n->is_leaf()) {
      if (n->grad) {
        add_inplace(*n->grad, g);
      } else {
        n->grad = std::move(g);
      }
      continue;
    }
    auto parts = n->backward(g);
    n->grad = std::move(g);
    n->consumed = true;
    for (std::size_t slot = 0; slot < n->parents.size(); ++slot) {
      Node<T>* p = n->parents[slot].get();
      if (!p->requires_grad || slot >= parts.size() || !parts[slot]) continue;
      if (parts[slot]->shape() != p->value.shape()) {
        throw GraphError("backward rule produced gradient of shape " + to_string(parts[slot]->shape()) +
                         " for operand of shape " + to_string(p->value.shape()));
      }
      pending[p].push_back({n->id, slot, std::move(*parts[slot])});
    }
  }
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, const Tensor<T>& p, T eps) {
  if (!(eps > T(0))) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  Tensor<T> g(p.shape());
  Tensor<T> probe = p;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    const T up = f(static_cast<const Tensor<T>&>(probe));
    probe[i] = orig - eps;
    const T down = f(static_cast<const Tensor<T>&>(probe));
    probe[i] = orig;
    g[i] = (up - down) / (T(2) * eps);
  }
  return g;
}

/// max |a-b| / max(1, max|b|) style relative error used by gradient checks.
template <typename T>
T relative_error(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "relative_error");
  T scale = T(0);
  for (T v : b.data()) scale = std::max(scale, std::abs(v));
  return max_abs_diff(a, b) / std::max(T(1), scale);
}

// ---------------------------------------------------------------------------
// Elementwise and reduction operators.

enum class Elementwise { add, sub, mul, relu, square };

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  return make_op<T>(zip(a.value(), b.value(), [](T x, T y) { return x + y; }), {a, b},
                    [](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> { return {g, g}; });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  return make_op<T>(zip(a.value(), b.value(), [](T x, T y) { return x - y; }), {a, b},
                    [](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
                      return {g, map(g, [](T v) { return -v; })};
                    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> av = a.value(), bv = b.value();
  return make_op<T>(zip(av, bv, [](T x, T y) { return x * y; }), {a, b},
                    [av, bv](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
                      return {zip(g, bv, [](T x, T y) { return x * y; }),
                              zip(g, av, [](T x, T y) { return x * y; })};
                    });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  // NaN passes through so that divergence reaches the loss.
  Tensor<T> out = map(a.value(), [](T x) { return x > T(0) || x != x ? x : T(0); });
  if (!records<T>({a})) return make_op<T>(std::move(out), {a}, {});
  Tensor<T> kept = out;
  return make_op<T>(std::move(out), {a}, [kept](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
    return {zip(g, kept, [](T x, T y) { return y > T(0) ? x : T(0); })};
  });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  Tensor<T> av = a.value();
  return make_op<T>(map(av, [](T x) { return x * x; }), {a},
                    [av](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
                      return {zip(g, av, [](T x, T y) { return T(2) * x * y; })};
                    });
}

template <typename T>
Var<T> elementwise(Elementwise op, const Var<T>& a, const Var<T>& b = {}) {
  switch (op) {
    case Elementwise::add: return add(a, b);
    case Elementwise::sub: return sub(a, b);
    case Elementwise::mul: return mul(a, b);
    case Elementwise::relu: return relu(a);
    case Elementwise::square: return square(a);
  }
  throw std::invalid_argument("unknown elementwise op");
}

/// Multiplies by a constant scalar.
template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  return make_op<T>(map(a.value(), [c](T x) { return x * c; }), {a},
                    [c](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
                      return {map(g, [c](T x) { return x * c; })};
                    });
}

/// Scalar-by-tensor product where the scalar is itself a graph node.
template <typename T>
Var<T> scalar_mul(const Var<T>& s, const Var<T>& a) {
  if (s.value().size() != 1) throw ShapeError("scalar_mul: first operand must be a scalar, got " + to_string(s.shape()));
  const T sv = s.value()[0];
  Tensor<T> av = a.value();
  Shape sshape = s.shape();
  return make_op<T>(map(av, [sv](T x) { return x * sv; }), {s, a},
                    [sv, av, sshape](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
                      T acc = 0;
                      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
                      return {Tensor<T>(sshape, acc), map(g, [sv](T x) { return x * sv; })};
                    });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Shape in = a.shape();
  return make_op<T>(Tensor<T>::scalar(sum(a.value())), {a},
                    [in](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> { return {Tensor<T>(in, g[0])}; });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  Shape in = a.shape();
  const T n = static_cast<T>(a.value().size());
  return make_op<T>(Tensor<T>::scalar(sum(a.value()) / n), {a},
                    [in, n](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
                      return {Tensor<T>(in, g[0] / n)};
                    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Shape in = a.shape();
  return make_op<T>(a.value().reshaped(std::move(shape)), {a},
                    [in](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> { return {g.reshaped(in)}; });
}

/// Mean over the last axis: [..., k] -> [...] (rank-1 input gives shape {1}).
template <typename T>
Var<T> mean_last(const Var<T>& a) {
  const Shape in = a.shape();
  const std::size_t k = in.back();
  const std::size_t rows = a.value().size() / k;
  Shape out_shape(in.begin(), in.end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out(out_shape, uninitialized);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t j = 0; j < k; ++j) acc += a.value()[r * k + j];
    out[r] = acc / static_cast<T>(k);
  }
  return make_op<T>(std::move(out), {a}, [in, k, rows](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
    Tensor<T> ga(in, uninitialized);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < k; ++j) ga[r * k + j] = g[r] / static_cast<T>(k);
    return {ga};
  });
}

/// Euclidean norm over the last axis: [..., k] -> [...].
template <typename T>
Var<T> l2_norm_last(const Var<T>& a) {
  const Shape in = a.shape();
  const std::size_t k = in.back();
  const std::size_t rows = a.value().size() / k;
  Shape out_shape(in.begin(), in.end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t j = 0; j < k; ++j) acc += a.value()[r * k + j] * a.value()[r * k + j];
    out[r] = std::sqrt(acc);
  }
  Tensor<T> av = a.value(), norms = out;
  return make_op<T>(std::move(out), {a},
                    [in, k, rows, av, norms](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
                      Tensor<T> ga(in);
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T n = norms[r];
                        if (n == T(0)) continue;
                        for (std::size_t j = 0; j < k; ++j) ga[r * k + j] = g[r] * av[r * k + j] / n;
                      }
                      return {ga};
                    });
}

/// Mean squared difference to a constant target.
template <typename T>
Var<T> mse_to(const Var<T>& a, const Tensor<T>& target) {
  require_same_shape(a.value(), target, "mse");
  const T n = static_cast<T>(target.size());
  Tensor<T> diff = zip(a.value(), target, [](T x, T y) { return x - y; });
  T acc = 0;
  for (T d : diff.data()) acc += d * d;
  return make_op<T>(Tensor<T>::scalar(acc / n), {a}, [diff, n](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
    const T c = T(2) * g[0] / n;
    return {map(diff, [c](T d) { return c * d; })};
  });
}

/// Weighted sum of scalar nodes: sum_i w_i * x_i.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, const std::vector<T>& weights) {
  if (xs.size() != weights.size() || xs.empty()) throw std::invalid_argument("weighted_sum: size mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].value().size() != 1) throw ShapeError("weighted_sum expects scalars, got " + to_string(xs[i].shape()));
    acc += weights[i] * xs[i].value()[0];
  }
  return make_op<T>(Tensor<T>::scalar(acc), xs, [weights](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
    std::vector<std::optional<Tensor<T>>> out;
    for (T w : weights) out.emplace_back(Tensor<T>::scalar(w * g[0]));
    return out;
  });
}

}  // namespace tips
