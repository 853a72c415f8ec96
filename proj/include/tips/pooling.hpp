#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tips/autodiff.hpp"
#include "tips/nn.hpp"

namespace tips {

enum class PoolKind { max, avg, blur, aps, tips, gap_only };

inline const char* to_string(PoolKind k) {
  switch (k) {
    case PoolKind::max: return "max";
    case PoolKind::avg: return "avg";
    case PoolKind::blur: return "blur";
    case PoolKind::aps: return "aps";
    case PoolKind::tips: return "tips";
    case PoolKind::gap_only: return "gap";
  }
  return "?";
}

inline void check_stride(std::size_t s) {
  if (s < 2) throw std::invalid_argument("pooling stride must be >= 2, got " + std::to_string(s));
}

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// ---------------------------------------------------------------------------
// Polyphase decomposition.

/// The s*s interleaved sub-grids of a map, component index i*s + j.
template <typename T>
struct PolyphaseStack {
  std::vector<Tensor<T>> components;
  std::size_t stride = 2;
};

/**
 * component[i*s+j][..., n1, n2] = x[..., s*n1 + i, s*n2 + j] over the leading
 * planes. Extents not divisible by s are zero-padded on the bottom/right.
 */
template <typename T>
PolyphaseStack<T> polyphase_decompose(const Tensor<T>& x, std::size_t s) {
  check_stride(s);
  auto [planes, h, w] = planes_hw(x.shape());
  const std::size_t hs = ceil_div(h, s), ws = ceil_div(w, s);
  Shape cs = x.shape();
  cs[cs.size() - 2] = hs;
  cs[cs.size() - 1] = ws;
  PolyphaseStack<T> out{{}, s};
  out.components.reserve(s * s);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j) {
      Tensor<T> c(cs, T(0));
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t a = 0; a < hs; ++a)
          for (std::size_t b = 0; b < ws; ++b) {
            const std::size_t y = s * a + i, xx = s * b + j;
            if (y < h && xx < w) c[(p * hs + a) * ws + b] = x[(p * h + y) * w + xx];
          }
      out.components.push_back(std::move(c));
    }
  return out;
}

/// Inverse of polyphase_decompose; returns the padded map (s*hs x s*ws).
template <typename T>
Tensor<T> polyphase_interleave(const PolyphaseStack<T>& stack) {
  const std::size_t s = stack.stride;
  if (stack.components.size() != s * s) throw ShapeError("polyphase_interleave: expected s*s components");
  auto [planes, hs, ws] = planes_hw(stack.components[0].shape());
  Shape os = stack.components[0].shape();
  os[os.size() - 2] = hs * s;
  os[os.size() - 1] = ws * s;
  Tensor<T> out(os, uninitialized);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j) {
      const Tensor<T>& c = stack.components[i * s + j];
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t a = 0; a < hs; ++a)
          for (std::size_t b = 0; b < ws; ++b) out[(p * hs * s + s * a + i) * ws * s + s * b + j] = c[(p * hs + a) * ws + b];
    }
  return out;
}

namespace detail {
inline Shape pooled_shape(const Shape& in, std::size_t s) {
  Shape out = in;
  out[out.size() - 2] = ceil_div(in[in.size() - 2], s);
  out[out.size() - 1] = ceil_div(in[in.size() - 1], s);
  return out;
}
}  // namespace detail

/// Differentiable single polyphase component (strided one-hot sampling).
template <typename T>
Var<T> polyphase_component(const Var<T>& x, std::size_t s, std::size_t index) {
  check_stride(s);
  if (index >= s * s) throw std::out_of_range("polyphase component index out of range");
  const Shape in = x.shape();
  auto [planes, h, w] = planes_hw(in);
  const Shape os = detail::pooled_shape(in, s);
  const std::size_t hs = os[os.size() - 2], ws = os[os.size() - 1];
  const std::size_t i = index / s, j = index % s;
  Tensor<T> out(os, T(0));
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t a = 0; a < hs; ++a)
      for (std::size_t b = 0; b < ws; ++b)
        if (s * a + i < h && s * b + j < w) out[(p * hs + a) * ws + b] = x.value()[(p * h + s * a + i) * w + s * b + j];
  return make_op<T>(std::move(out), {x}, [=](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
    Tensor<T> gx(in, T(0));
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t a = 0; a < hs; ++a)
        for (std::size_t b = 0; b < ws; ++b)
          if (s * a + i < h && s * b + j < w) gx[(p * h + s * a + i) * w + s * b + j] = g[(p * hs + a) * ws + b];
    return {gx};
  });
}

// ---------------------------------------------------------------------------
// Max and average pooling (kernel = stride = s, zero-padded windows).

template <typename T>
Var<T> max_pool(const Var<T>& x, std::size_t s) {
  check_stride(s);
  const Shape in = x.shape();
  auto [planes, h, w] = planes_hw(in);
  const Shape os = detail::pooled_shape(in, s);
  const std::size_t hs = os[os.size() - 2], ws = os[os.size() - 1];
  Tensor<T> out(os, uninitialized);
  // Flat source index of each selected maximum; npos marks a padded zero.
  std::vector<std::size_t> arg(out.size());
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t a = 0; a < hs; ++a)
      for (std::size_t b = 0; b < ws; ++b) {
        T best = T(0);
        std::size_t best_idx = npos;
        for (std::size_t m = 0; m < s; ++m)
          for (std::size_t q = 0; q < s; ++q) {
            const std::size_t y = s * a + m, xx = s * b + q;
            const bool inside = y < h && xx < w;
            const T v = inside ? x.value()[(p * h + y) * w + xx] : T(0);
            if ((m == 0 && q == 0) || v > best) {
              best = v;
              best_idx = inside ? (p * h + y) * w + xx : npos;
            }
          }
        const std::size_t o = (p * hs + a) * ws + b;
        out[o] = best;
        arg[o] = best_idx;
      }
  return make_op<T>(std::move(out), {x}, [in, arg](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
    Tensor<T> gx(in, T(0));
    for (std::size_t o = 0; o < arg.size(); ++o)
      if (arg[o] != static_cast<std::size_t>(-1)) gx[arg[o]] += g[o];
    return {gx};
  });
}

template <typename T>
Var<T> avg_pool(const Var<T>& x, std::size_t s) {
  check_stride(s);
  const Shape in = x.shape();
  auto [planes, h, w] = planes_hw(in);
  const Shape os = detail::pooled_shape(in, s);
  const std::size_t hs = os[os.size() - 2], ws = os[os.size() - 1];
  const T inv = T(1) / static_cast<T>(s * s);
  Tensor<T> out(os, T(0));
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t a = 0; a < hs; ++a)
      for (std::size_t b = 0; b < ws; ++b) {
        T acc = 0;
        for (std::size_t m = 0; m < s; ++m)
          for (std::size_t q = 0; q < s; ++q) {
            const std::size_t y = s * a + m, xx = s * b + q;
            if (y < h && xx < w) acc += x.value()[(p * h + y) * w + xx];
          }
        out[(p * hs + a) * ws + b] = acc * inv;
      }
  return make_op<T>(std::move(out), {x}, [=](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
    Tensor<T> gx(in, T(0));
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) gx[(p * h + y) * w + xx] = g[(p * hs + y / s) * ws + xx / s] * inv;
    return {gx};
  });
}

// ---------------------------------------------------------------------------
// BlurPool.

/// Binomial low-pass filter of size 3 or 5, separable, normalized to sum 1.
struct BlurSpec {
  std::size_t lpf_size = 5;

  std::vector<double> taps() const {
    switch (lpf_size) {
      case 3: return {1.0 / 4, 2.0 / 4, 1.0 / 4};
      case 5: return {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
      default: throw std::invalid_argument("BlurSpec: lpf size must be 3 or 5, got " + std::to_string(lpf_size));
    }
  }

  template <typename T>
  Tensor<T> kernel() const {
    const auto t = taps();
    const std::size_t n = t.size();
    Tensor<T> k({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) k[i * n + j] = static_cast<T>(t[i] * t[j]);
    return k;
  }
};

/// Depthwise "same" convolution of every plane with the binomial kernel.
template <typename T>
Var<T> blur(const Var<T>& x, const BlurSpec& spec, PaddingMode padding) {
  const Tensor<T> k = spec.kernel<T>();
  const std::size_t n = k.dim(0);
  const long pad = static_cast<long>(n / 2);
  const Shape in = x.shape();
  auto [planes, h, w] = planes_hw(in);
  const long lh = static_cast<long>(h), lw = static_cast<long>(w);
  if (padding == PaddingMode::circular && (pad > lh || pad > lw)) throw ShapeError("blur: map smaller than filter radius");
  Tensor<T> out(in, T(0));
  for (std::size_t p = 0; p < planes; ++p)
    for (long i = 0; i < lh; ++i)
      for (long j = 0; j < lw; ++j) {
        T acc = 0;
        for (std::size_t m = 0; m < n; ++m) {
          const long y = detail::padded_index(i + static_cast<long>(m) - pad, lh, padding);
          if (y < 0) continue;
          for (std::size_t q = 0; q < n; ++q) {
            const long xx = detail::padded_index(j + static_cast<long>(q) - pad, lw, padding);
            if (xx >= 0) acc += k[m * n + q] * x.value()[(p * h + y) * w + xx];
          }
        }
        out[(p * h + i) * w + j] = acc;
      }
  return make_op<T>(std::move(out), {x}, [=](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
    Tensor<T> gx(in, T(0));
    for (std::size_t p = 0; p < planes; ++p)
      for (long i = 0; i < lh; ++i)
        for (long j = 0; j < lw; ++j) {
          const T gv = g[(p * h + i) * w + j];
          for (std::size_t m = 0; m < n; ++m) {
            const long y = detail::padded_index(i + static_cast<long>(m) - pad, lh, padding);
            if (y < 0) continue;
            for (std::size_t q = 0; q < n; ++q) {
              const long xx = detail::padded_index(j + static_cast<long>(q) - pad, lw, padding);
              if (xx >= 0) gx[(p * h + y) * w + xx] += k[m * n + q] * gv;
            }
          }
        }
    return {gx};
  });
}

/// Low-pass filter, then keep polyphase component 0.
template <typename T>
Var<T> blur_pool(const Var<T>& x, const BlurSpec& spec, std::size_t s, PaddingMode padding) {
  check_stride(s);
  return polyphase_component(blur(x, spec, padding), s, 0);
}

// ---------------------------------------------------------------------------
// Adaptive polyphase sampling.

struct ApsSpec {
  double p = 2.0;
};

/**
 * Per sample (leading axis of a [N, C, H, W] map), keeps the polyphase
 * component with the largest l_p norm taken jointly over channels and
 * positions. Ties resolve to the lowest component index. The chosen indices
 * are written to `chosen` when provided.
 */
template <typename T>
Var<T> aps_pool(const Var<T>& x, const ApsSpec& spec, std::size_t s, std::vector<std::size_t>* chosen = nullptr) {
  check_stride(s);
  if (!(spec.p >= 1.0)) throw std::invalid_argument("aps_pool: norm order p must be >= 1");
  const Shape in = x.shape();
  if (in.size() != 4) throw ShapeError("aps_pool: expected [N,C,H,W], got " + to_string(in));
  const std::size_t n = in[0], c = in[1], h = in[2], w = in[3];
  const std::size_t hs = ceil_div(h, s), ws = ceil_div(w, s);
  std::vector<std::size_t> pick(n, 0);
  for (std::size_t b = 0; b < n; ++b) {
    double best = -1.0;
    for (std::size_t idx = 0; idx < s * s; ++idx) {
      const std::size_t i = idx / s, j = idx % s;
      double acc = 0;
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t y = i; y < h; y += s)
          for (std::size_t xx = j; xx < w; xx += s) {
            const double v = std::abs(static_cast<double>(x.value()[((b * c + k) * h + y) * w + xx]));
            acc += spec.p == 2.0 ? v * v : std::pow(v, spec.p);
          }
      if (acc > best) {
        best = acc;
        pick[b] = idx;
      }
    }
  }
  if (chosen) *chosen = pick;
  Tensor<T> out({n, c, hs, ws}, T(0));
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t i = pick[b] / s, j = pick[b] % s;
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t a = 0; a < hs; ++a)
        for (std::size_t q = 0; q < ws; ++q)
          if (s * a + i < h && s * q + j < w) out.at(b, k, a, q) = x.value().at(b, k, s * a + i, s * q + j);
  }
  return make_op<T>(std::move(out), {x}, [=](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
    Tensor<T> gx(in, T(0));
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t i = pick[b] / s, j = pick[b] % s;
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t a = 0; a < hs; ++a)
          for (std::size_t q = 0; q < ws; ++q)
            if (s * a + i < h && s * q + j < w) gx.at(b, k, s * a + i, s * q + j) = g.at(b, k, a, q);
    }
    return {gx};
  });
}

// ---------------------------------------------------------------------------
// TIPS: learned per-channel convex combination of polyphase components.

/**
 * Mixing branch parameters. psi is a c -> c "same" 3x3 convolution whose
 * ReLU output feeds global average pooling and the dense projection
 * [c*s*s, c] (the 1x1 convolution on the pooled vector). When `undo_psi` is
 * set, the shift-undo objective trains that separate convolution instead of
 * the one feeding the mixing coefficients.
 */
template <typename T>
struct TipsParams {
  Conv2dParams<T> psi;
  Var<T> mix_weight;
  Var<T> mix_bias;
  std::size_t stride = 2;
  std::optional<Conv2dParams<T>> undo_psi;

  std::size_t channels() const { return psi.in_channels(); }
};

template <typename T>
TipsParams<T> make_tips(std::size_t channels, std::size_t s, PaddingMode padding, Rng& rng, bool shared_psi = true) {
  check_stride(s);
  TipsParams<T> p;
  p.psi = make_conv<T>(channels, channels, 3, padding, rng);
  p.mix_weight = Var<T>::parameter(kaiming_normal<T>({channels * s * s, channels}, channels, rng));
  p.mix_bias = Var<T>::parameter(Tensor<T>({channels * s * s}, T(0)));
  p.stride = s;
  if (!shared_psi) p.undo_psi = make_conv<T>(channels, channels, 3, padding, rng);
  return p;
}

template <typename T>
struct TipsMixing {
  /// Per-sample, per-channel coefficients [N, c, s*s]; rows sum to 1.
  Var<T> tau;
  /// ReLU(conv3x3(x)), the spatial trunk of the mixing branch.
  Var<T> psi_out;
};

/// psi(x) = ReLU(conv3x3(x)) with the given convolution.
template <typename T>
Var<T> apply_psi(const Var<T>& x, const Conv2dParams<T>& conv) {
  return relu(conv2d(x, conv));
}

/// tau = softmax over s*s of reshape(W * GAP(psi(x)) + b, [N, c, s*s]).
template <typename T>
TipsMixing<T> tips_mixing(const Var<T>& x, const TipsParams<T>& p) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("tips_mixing: expected [N,C,H,W], got " + to_string(xs));
  if (xs[1] != p.channels()) {
    throw ShapeError("tips_mixing: input has " + std::to_string(xs[1]) + " channels, branch expects " +
                     std::to_string(p.channels()));
  }
  const std::size_t n = xs[0], c = xs[1], ss = p.stride * p.stride;
  Var<T> trunk = apply_psi(x, p.psi);
  Var<T> logits = linear(global_avg_pool(trunk), p.mix_weight, p.mix_bias);
  Var<T> tau = reshape(softmax(reshape(logits, {n * c, ss})), {n, c, ss});
  return {tau, trunk};
}

/// out[n,k] = sum_j tau[n,k,j] * component_j(x)[n,k].
template <typename T>
Var<T> tips_combine(const Var<T>& x, const Var<T>& tau, std::size_t s) {
  check_stride(s);
  const Shape in = x.shape();
  if (in.size() != 4) throw ShapeError("tips_combine: expected [N,C,H,W], got " + to_string(in));
  const std::size_t n = in[0], c = in[1], h = in[2], w = in[3];
  if (tau.shape() != Shape{n, c, s * s}) {
    throw ShapeError("tips_combine: tau " + to_string(tau.shape()) + " does not match input " + to_string(in));
  }
  const std::size_t hs = ceil_div(h, s), ws = ceil_div(w, s);
  Tensor<T> out({n, c, hs, ws}, T(0));
  const Tensor<T>& xv = x.value();
  const Tensor<T>& tv = tau.value();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k) {
      const T* t = tv.ptr() + (b * c + k) * s * s;
      for (std::size_t a = 0; a < hs; ++a)
        for (std::size_t q = 0; q < ws; ++q) {
          T acc = 0;
          for (std::size_t i = 0; i < s; ++i)
            for (std::size_t j = 0; j < s; ++j) {
              const std::size_t y = s * a + i, xx = s * q + j;
              if (y < h && xx < w) acc += t[i * s + j] * xv.at(b, k, y, xx);
            }
          out.at(b, k, a, q) = acc;
        }
    }
  if (!records<T>({x, tau})) return make_op<T>(std::move(out), {x, tau}, {});
  return make_op<T>(std::move(out), {x, tau}, [=](const Tensor<T>& g) -> std::vector<std::optional<Tensor<T>>> {
    Tensor<T> gx(in, T(0));
    Tensor<T> gt({n, c, s * s}, T(0));
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t k = 0; k < c; ++k) {
        const T* t = tv.ptr() + (b * c + k) * s * s;
        T* dt = gt.ptr() + (b * c + k) * s * s;
        for (std::size_t a = 0; a < hs; ++a)
          for (std::size_t q = 0; q < ws; ++q) {
            const T gv = g.at(b, k, a, q);
            for (std::size_t i = 0; i < s; ++i)
              for (std::size_t j = 0; j < s; ++j) {
                const std::size_t y = s * a + i, xx = s * q + j;
                if (y < h && xx < w) {
                  dt[i * s + j] += gv * xv.at(b, k, y, xx);
                  gx.at(b, k, y, xx) += gv * t[i * s + j];
                }
              }
          }
      }
    return {std::move(gx), std::move(gt)};
  });
}

template <typename T>
Var<T> tips_pool(const Var<T>& x, const TipsParams<T>& p) {
  return tips_combine(x, tips_mixing(x, p).tau, p.stride);
}

// ---------------------------------------------------------------------------
// Maximum-sampling measurement.

/**
 * Fraction of (plane, output location) pairs whose pooled value equals the
 * maximum of its s x s input window (zero-padded), within
 * tol * max(1, |window max|). Flat windows (every entry equal within the same
 * tolerance, e.g. all-zero after ReLU) match any sampler and are left out of
 * both counts; a map made only of flat windows scores 1.
 */
template <typename T>
double measure_window_max_hits(const Tensor<T>& x, const Tensor<T>& out, std::size_t s, double tol = 1e-6) {
  check_stride(s);
  auto [planes, h, w] = planes_hw(x.shape());
  const Shape expect = detail::pooled_shape(x.shape(), s);
  if (out.shape() != expect) {
    throw ShapeError("measure_window_max_hits: output " + to_string(out.shape()) + " but input " + to_string(x.shape()) +
                     " pools to " + to_string(expect));
  }
  const std::size_t hs = expect[expect.size() - 2], ws = expect[expect.size() - 1];
  std::size_t hits = 0, counted = 0;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t a = 0; a < hs; ++a)
      for (std::size_t b = 0; b < ws; ++b) {
        double mx = 0, mn = 0;
        bool first = true;
        for (std::size_t m = 0; m < s; ++m)
          for (std::size_t q = 0; q < s; ++q) {
            const std::size_t y = s * a + m, xx = s * b + q;
            const double v = (y < h && xx < w) ? static_cast<double>(x[(p * h + y) * w + xx]) : 0.0;
            if (first || v > mx) mx = v;
            if (first || v < mn) mn = v;
            first = false;
          }
        const double slack = tol * std::max(1.0, std::abs(mx));
        if (mx - mn <= slack) continue;
        ++counted;
        const double o = static_cast<double>(out[(p * hs + a) * ws + b]);
        if (std::abs(o - mx) <= slack) ++hits;
      }
  if (counted == 0) return 1.0;
  return static_cast<double>(hits) / static_cast<double>(counted);
}

}  // namespace tips
