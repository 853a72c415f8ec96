#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tips/autodiff.hpp"
#include "tips/rng.hpp"

namespace tips {

enum class PaddingMode { zero, circular };

inline const char* to_string(PaddingMode m) { return m == PaddingMode::zero ? "zero" : "circular"; }

struct ConvSpec {
  std::size_t stride = 1;
  std::size_t pad = 1;
  PaddingMode padding = PaddingMode::circular;
};

/// Learnable 2-D convolution: weight [out, in, k, k], bias [out].
template <typename T>
struct Conv2dParams {
  Var<T> weight;
  Var<T> bias;
  ConvSpec spec;

  std::size_t out_channels() const { return weight.shape()[0]; }
  std::size_t in_channels() const { return weight.shape()[1]; }
  std::size_t kernel() const { return weight.shape()[2]; }
};

/// Kaiming-normal (fan-in) draw: N(0, 2/fan_in).
template <typename T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(std * rng.normal());
  return t;
}

/// "Same"-padded k x k convolution with Kaiming-normal weights and zero bias.
template <typename T>
Conv2dParams<T> make_conv(std::size_t in_ch, std::size_t out_ch, std::size_t k, PaddingMode padding, Rng& rng,
                          std::size_t stride = 1) {
  if (k % 2 == 0) throw std::invalid_argument("make_conv: 'same' padding needs an odd kernel");
  return {Var<T>::parameter(kaiming_normal<T>({out_ch, in_ch, k, k}, in_ch * k * k, rng)),
          Var<T>::parameter(Tensor<T>({out_ch}, T(0))), ConvSpec{stride, (k - 1) / 2, padding}};
}

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

/// Source index along one axis after padding, or -1 for a zero-padded position.
inline long padded_index(long pos, long extent, PaddingMode mode) {
  if (pos >= 0 && pos < extent) return pos;
  if (mode == PaddingMode::zero) return -1;
  return ((pos % extent) + extent) % extent;
}

struct ConvGeometry {
  std::size_t n, c, h, w, k, ho, wo, stride, pad;
  PaddingMode mode;
  std::size_t rows() const { return c * k * k; }
  std::size_t cols() const { return n * ho * wo; }
};

/// Source offsets per kernel tap along one axis (-1 marks a zero-padded tap).
inline std::vector<long> tap_table(std::size_t k, std::size_t out, std::size_t stride, std::size_t pad, std::size_t extent,
                                   PaddingMode mode) {
  std::vector<long> t(k * out);
  for (std::size_t m = 0; m < k; ++m)
    for (std::size_t i = 0; i < out; ++i)
      t[m * out + i] = padded_index(static_cast<long>(i * stride + m) - static_cast<long>(pad), static_cast<long>(extent), mode);
  return t;
}

/// Tap tables plus, per horizontal tap, the run of output columns whose
/// sources are contiguous and unpadded (stride 1 only; empty otherwise).
struct ConvTaps {
  std::vector<long> ys, xs;
  std::vector<std::size_t> lo, hi;

  explicit ConvTaps(const ConvGeometry& g)
      : ys(tap_table(g.k, g.ho, g.stride, g.pad, g.h, g.mode)),
        xs(tap_table(g.k, g.wo, g.stride, g.pad, g.w, g.mode)),
        lo(g.k, 0),
        hi(g.k, 0) {
    if (g.stride != 1) return;
    for (std::size_t q = 0; q < g.k; ++q) {
      const long off = static_cast<long>(q) - static_cast<long>(g.pad);
      const long a = std::max<long>(0, -off);
      const long b = std::min<long>(static_cast<long>(g.wo), static_cast<long>(g.w) - off);
      if (a < b) {
        lo[q] = static_cast<std::size_t>(a);
        hi[q] = static_cast<std::size_t>(b);
      }
    }
  }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, const ConvTaps& t, T* col) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t m = 0; m < g.k; ++m)
      for (std::size_t q = 0; q < g.k; ++q) {
        T* row = col + ((ci * g.k + m) * g.k + q) * g.cols();
        const long* xq = t.xs.data() + q * g.wo;
        const std::size_t lo = t.lo[q], hi = t.hi[q];
        for (std::size_t b = 0; b < g.n; ++b) {
          const T* src = x + (b * g.c + ci) * g.h * g.w;
          T* dst = row + b * plane;
          for (std::size_t i = 0; i < g.ho; ++i) {
            const long y = t.ys[m * g.ho + i];
            T* d = dst + i * g.wo;
            if (y < 0) {
              std::fill(d, d + g.wo, T(0));
              continue;
            }
            const T* s = src + y * static_cast<long>(g.w);
            for (std::size_t j = 0; j < lo; ++j) d[j] = xq[j] < 0 ? T(0) : s[xq[j]];
            if (hi > lo) std::copy(s + xq[lo], s + xq[lo] + (hi - lo), d + lo);
            for (std::size_t j = std::max(lo, hi); j < g.wo; ++j) d[j] = xq[j] < 0 ? T(0) : s[xq[j]];
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, const ConvTaps& t, T* dx) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t m = 0; m < g.k; ++m)
      for (std::size_t q = 0; q < g.k; ++q) {
        const T* row = col + ((ci * g.k + m) * g.k + q) * g.cols();
        const long* xq = t.xs.data() + q * g.wo;
        const std::size_t lo = t.lo[q], hi = t.hi[q];
        for (std::size_t b = 0; b < g.n; ++b) {
          T* dst = dx + (b * g.c + ci) * g.h * g.w;
          const T* src = row + b * plane;
          for (std::size_t i = 0; i < g.ho; ++i) {
            const long y = t.ys[m * g.ho + i];
            if (y < 0) continue;
            T* d = dst + y * static_cast<long>(g.w);
            const T* s = src + i * g.wo;
            for (std::size_t j = 0; j < lo; ++j)
              if (xq[j] >= 0) d[xq[j]] += s[j];
            if (hi > lo) {
              T* dd = d + xq[lo];
              for (std::size_t j = lo; j < hi; ++j) dd[j - lo] += s[j];
            }
            for (std::size_t j = std::max(lo, hi); j < g.wo; ++j)
              if (xq[j] >= 0) d[xq[j]] += s[j];
          }
        }
      }
}

}  // namespace detail

/**
 * Cross-correlation over a batch: x [N, C, H, W], weight [O, C, k, k],
 * bias [O] -> [N, O, Ho, Wo] with Ho = (H + 2 pad - k) / stride + 1.
 * Circular padding wraps indices modulo the spatial extent.
 */
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvSpec& spec) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + to_string(xs));
  if (ws.size() != 4 || ws[2] != ws[3]) throw ShapeError("conv2d: weight must be [O,C,k,k], got " + to_string(ws));
  if (ws[1] != xs[1]) {
    throw ShapeError("conv2d: weight expects " + std::to_string(ws[1]) + " input channels, input " + to_string(xs) +
                     " has " + std::to_string(xs[1]));
  }
  if (bias.shape() != Shape{ws[0]}) throw ShapeError("conv2d: bias must be [" + std::to_string(ws[0]) + "]");
  if (spec.stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const std::size_t k = ws[2];
  if (xs[2] + 2 * spec.pad < k || xs[3] + 2 * spec.pad < k) {
    throw ShapeError("conv2d: padded input " + to_string(xs) + " smaller than kernel " + std::to_string(k));
  }
  if (spec.padding == PaddingMode::circular && (spec.pad > xs[2] || spec.pad > xs[3])) {
    throw ShapeError("conv2d: circular pad exceeds spatial extent");
  }
  detail::ConvGeometry g{xs[0], xs[1], xs[2], xs[3], k,
                         (xs[2] + 2 * spec.pad - k) / spec.stride + 1,
                         (xs[3] + 2 * spec.pad - k) / spec.stride + 1,
                         spec.stride, spec.pad, spec.padding};
  const std::size_t out_ch = ws[0];
  const std::size_t plane = g.ho * g.wo;
  // Per-sample im2col. When a backward pass will follow, the columns of every
  // sample are kept for the weight gradient instead of being rebuilt.
  detail::ConvGeometry g1 = g;
  g1.n = 1;
  const std::size_t in_plane = g.c * g.h * g.w;
  const std::size_t col_size = g1.rows() * plane;
  const bool recording = records<T>({x, weight, bias});

  auto taps = std::make_shared<const detail::ConvTaps>(g1);
  std::shared_ptr<std::vector<T, DefaultInitAllocator<T>>> cols =
      std::make_shared<std::vector<T, DefaultInitAllocator<T>>>(recording ? g.n * col_size : col_size);

  Tensor<T> out({g.n, out_ch, g.ho, g.wo}, uninitialized);
  {
    detail::ConstMatMap<T> wm(weight.value().ptr(), out_ch, g1.rows());
    const T* b = bias.value().ptr();
    for (std::size_t n = 0; n < g.n; ++n) {
      T* col = cols->data() + (recording ? n * col_size : 0);
      detail::im2col(x.value().ptr() + n * in_plane, g1, *taps, col);
      detail::MatMap<T> om(out.ptr() + n * out_ch * plane, out_ch, plane);
      om.noalias() = wm * detail::ConstMatMap<T>(col, g1.rows(), plane);
      for (std::size_t o = 0; o < out_ch; ++o) om.row(o).array() += b[o];
    }
  }

  if (!recording) return make_op<T>(std::move(out), {x, weight, bias}, {});
  const bool need_x = x.requires_grad();
  Tensor<T> wv = weight.value();
  Shape x_shape = xs, w_shape = ws;
  return make_op<T>(
      std::move(out), {x, weight, bias},
      [g, g1, taps, cols, col_size, out_ch, plane, in_plane, need_x, wv, x_shape, w_shape](
          const Tensor<T>& grad) -> std::vector<std::optional<Tensor<T>>> {
        Tensor<T> gb({out_ch}, T(0));
        Tensor<T> gw(w_shape, uninitialized);
        detail::MatMap<T> gwm(gw.ptr(), out_ch, g1.rows());
        detail::ConstMatMap<T> wm(wv.ptr(), out_ch, g1.rows());
        std::optional<Tensor<T>> gx;
        if (need_x) gx.emplace(x_shape, T(0));
        detail::RowMatrix<T> gcol(g1.rows(), plane);
        for (std::size_t n = 0; n < g.n; ++n) {
          detail::ConstMatMap<T> gm(grad.ptr() + n * out_ch * plane, out_ch, plane);
          // Plain loop: Eigen's vectorized sum depends on buffer alignment.
          for (std::size_t o = 0; o < out_ch; ++o) {
            const T* row = grad.ptr() + (n * out_ch + o) * plane;
            T acc = 0;
            for (std::size_t i = 0; i < plane; ++i) acc += row[i];
            gb[o] += acc;
          }
          detail::ConstMatMap<T> cm(cols->data() + n * col_size, g1.rows(), plane);
          if (n == 0)
            gwm.noalias() = gm * cm.transpose();
          else
            gwm.noalias() += gm * cm.transpose();
          if (need_x) {
            gcol.noalias() = wm.transpose() * gm;
            detail::col2im(gcol.data(), g1, *taps, gx->ptr() + n * in_plane);
          }
        }
        return {std::move(gx), std::move(gw), std::move(gb)};
      });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Conv2dParams<T>& p) {
  return conv2d(x, p.weight, p.bias, p.spec);
}

/// Per-channel batch normalization. Running statistics live behind shared
/// pointers so a const forward pass in training mode can update them.
template <typename T>
struct BatchNormParams {
  Var<T> gamma;
  Var<T> beta;
  std::shared_ptr<Tensor<T>> running_mean;
  std::shared_ptr<Tensor<T>> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  std::size_t channels() const { return gamma.shape()[0]; }
};

template <typename T>
BatchNormParams<T> make_batch_norm(std::size_t channels) {
  return {Var<T>::parameter(Tensor<T>({channels}, T(1))), Var<T>::parameter(Tensor<T>({channels}, T(0))),
          std::make_shared<Tensor<T>>(Shape{channels}, T(0)), std::make_shared<Tensor<T>>(Shape{channels}, T(1))};
}

/**
 * Training mode normalizes with the batch mean and biased variance over
 * (N, H, W) and folds them into the running estimates (unbiased variance);
 * inference mode uses the running estimates.
 */
template <typename T>
Var<T> batch_norm(const Var<T>& x, const BatchNormParams<T>& p, bool training) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("batch_norm: input must be [N,C,H,W], got " + to_string(xs));
  if (xs[1] != p.channels()) throw ShapeError("batch_norm: channel count mismatch for input " + to_string(xs));
  const std::size_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  const std::size_t m = n * hw;
  if (training && m < 2) throw ShapeError("batch_norm: training needs more than one value per channel");
  const Tensor<T>& xv = x.value();
  Tensor<T> xhat(xs, uninitialized);
  std::vector<T> inv_std(c);
  for (std::size_t k = 0; k < c; ++k) {
    double mu, var;
    if (training) {
      double s = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = xv.ptr() + (b * c + k) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += src[i];
      }
      mu = s / static_cast<double>(m);
      double q = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = xv.ptr() + (b * c + k) * hw;
        for (std::size_t i = 0; i < hw; ++i) q += (src[i] - mu) * (src[i] - mu);
      }
      var = q / static_cast<double>(m);
      auto& rm = (*p.running_mean)[k];
      auto& rv = (*p.running_var)[k];
      rm = static_cast<T>((1 - p.momentum) * rm + p.momentum * mu);
      rv = static_cast<T>((1 - p.momentum) * rv + p.momentum * q / static_cast<double>(m - 1));
    } else {
      mu = (*p.running_mean)[k];
      var = (*p.running_var)[k];
    }
    const T is = static_cast<T>(1.0 / std::sqrt(var + p.eps));
    inv_std[k] = is;
    const T tmu = static_cast<T>(mu);
    for (std::size_t b = 0; b < n; ++b) {
      const T* src = xv.ptr() + (b * c + k) * hw;
      T* dst = xhat.ptr() + (b * c + k) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = (src[i] - tmu) * is;
    }
  }
  Tensor<T> out(xs, uninitialized);
  const T* gamma = p.gamma.value().ptr();
  const T* beta = p.beta.value().ptr();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k) {
      const T* src = xhat.ptr() + (b * c + k) * hw;
      T* dst = out.ptr() + (b * c + k) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = gamma[k] * src[i] + beta[k];
    }
  if (!records<T>({x, p.gamma, p.beta})) return make_op<T>(std::move(out), {x, p.gamma, p.beta}, {});
  Tensor<T> gv = p.gamma.value();
  const bool need_x = x.requires_grad();
  return make_op<T>(
      std::move(out), {x, p.gamma, p.beta},
      [xhat = std::move(xhat), inv_std, gv, n, c, hw, m, training, need_x](
          const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
        Tensor<T> gg({c}, T(0)), gb({c}, T(0));
        std::optional<Tensor<T>> gx;
        if (need_x) gx.emplace(xhat.shape(), uninitialized);
        for (std::size_t k = 0; k < c; ++k) {
          T sg = 0, sgx = 0;
          for (std::size_t b = 0; b < n; ++b) {
            const T* gp = g.ptr() + (b * c + k) * hw;
            const T* xp = xhat.ptr() + (b * c + k) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sg += gp[i];
              sgx += gp[i] * xp[i];
            }
          }
          gg[k] = sgx;
          gb[k] = sg;
          if (!need_x) continue;
          const T scale = gv[k] * inv_std[k];
          const T mean_g = training ? sg / static_cast<T>(m) : T(0);
          const T mean_gx = training ? sgx / static_cast<T>(m) : T(0);
          for (std::size_t b = 0; b < n; ++b) {
            const T* gp = g.ptr() + (b * c + k) * hw;
            const T* xp = xhat.ptr() + (b * c + k) * hw;
            T* dp = gx->ptr() + (b * c + k) * hw;
            for (std::size_t i = 0; i < hw; ++i) dp[i] = scale * (gp[i] - mean_g - xp[i] * mean_gx);
          }
        }
        return {std::move(gx), std::move(gg), std::move(gb)};
      });
}

/// Dense layer: x [N, D], weight [O, D], bias [O] -> [N, O].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1]) {
    throw ShapeError("linear: input " + to_string(xs) + " incompatible with weight " + to_string(ws));
  }
  if (bias.shape() != Shape{ws[0]}) throw ShapeError("linear: bias must be [" + std::to_string(ws[0]) + "]");
  const std::size_t n = xs[0], d = xs[1], o = ws[0];
  Tensor<T> out({n, o}, uninitialized);
  detail::MatMap<T> om(out.ptr(), n, o);
  om.noalias() = detail::ConstMatMap<T>(x.value().ptr(), n, d) * detail::ConstMatMap<T>(weight.value().ptr(), o, d).transpose();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < o; ++j) om(r, j) += bias.value()[j];
  if (!records<T>({x, weight, bias})) return make_op<T>(std::move(out), {x, weight, bias}, {});
  Tensor<T> xv = x.value(), wv = weight.value();
  return make_op<T>(std::move(out), {x, weight, bias},
                    [xv, wv, n, d, o](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
                      detail::ConstMatMap<T> gm(g.ptr(), n, o);
                      Tensor<T> gx({n, d}, uninitialized), gw({o, d}, uninitialized), gb({o}, T(0));
                      detail::MatMap<T>(gx.ptr(), n, d).noalias() = gm * detail::ConstMatMap<T>(wv.ptr(), o, d);
                      detail::MatMap<T>(gw.ptr(), o, d).noalias() = gm.transpose() * detail::ConstMatMap<T>(xv.ptr(), n, d);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t j = 0; j < o; ++j) gb[j] += gm(r, j);
                      return {std::move(gx), std::move(gw), std::move(gb)};
                    });
}

/// Mean over the trailing two (spatial) axes: [..., H, W] -> [...].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  auto [planes, h, w] = planes_hw(x.shape());
  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out(out_shape, uninitialized);
  const T inv = T(1) / static_cast<T>(h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    T acc = 0;
    const T* src = x.ptr() + p * h * w;
    for (std::size_t i = 0; i < h * w; ++i) acc += src[i];
    out[p] = acc * inv;
  }
  return out;
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  Shape in = x.shape();
  auto [planes, h, w] = planes_hw(in);
  return make_op<T>(global_avg_pool(x.value()), {x},
                    [in, planes, h, w](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
                      Tensor<T> gx(in, uninitialized);
                      const T inv = T(1) / static_cast<T>(h * w);
                      for (std::size_t p = 0; p < planes; ++p)
                        for (std::size_t i = 0; i < h * w; ++i) gx[p * h * w + i] = g[p] * inv;
                      return {gx};
                    });
}

/// Max-subtracted softmax along the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& v) {
  const std::size_t k = v.shape().back();
  const std::size_t rows = v.size() / k;
  Tensor<T> out(v.shape(), uninitialized);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = v.ptr() + r * k;
    T* dst = out.ptr() + r * k;
    T m = src[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, src[j]);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += (dst[j] = std::exp(src[j] - m));
    for (std::size_t j = 0; j < k; ++j) dst[j] /= z;
  }
  return out;
}

template <typename T>
Var<T> softmax(const Var<T>& v) {
  Tensor<T> y = softmax(v.value());
  const std::size_t k = v.shape().back();
  Tensor<T> yk = y;
  return make_op<T>(std::move(y), {v}, [yk, k](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
    Tensor<T> gv(yk.shape(), uninitialized);
    for (std::size_t r = 0; r < yk.size() / k; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * yk[r * k + j];
      for (std::size_t j = 0; j < k; ++j) gv[r * k + j] = yk[r * k + j] * (g[r * k + j] - dot);
    }
    return {gv};
  });
}

/// Mean over rows of -log softmax(logits)[label]; logits [N, K].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::size_t>& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw ShapeError("cross_entropy: logits must be [N,K], got " + to_string(s));
  const std::size_t n = s[0], k = s[1];
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  }
  for (auto l : labels) {
    if (l >= k) throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " >= num_classes " + std::to_string(k));
  }
  Tensor<T> p = softmax(logits.value());
  T loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const T* z = logits.value().ptr() + r * k;
    T m = z[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, z[j]);
    T acc = 0;
    for (std::size_t j = 0; j < k; ++j) acc += std::exp(z[j] - m);
    loss += (m + std::log(acc)) - z[labels[r]];
  }
  loss /= static_cast<T>(n);
  return make_op<T>(Tensor<T>::scalar(loss), {logits},
                    [p, labels, n, k](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
                      Tensor<T> gl = p;
                      for (std::size_t r = 0; r < n; ++r) gl[r * k + labels[r]] -= T(1);
                      const T c = g[0] / static_cast<T>(n);
                      for (auto& v : gl.data()) v *= c;
                      return {gl};
                    });
}

/// Row-wise argmax with lowest-index tie-breaking.
template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.size() / k;
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[r * k + j] > logits[r * k + best]) best = j;
    out[r] = best;
  }
  return out;
}

}  // namespace tips
