#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include "tips/rng.hpp"
#include "tips/tensor.hpp"

namespace tips {

enum class ShiftMode { standard, circular };

inline const char* to_string(ShiftMode m) { return m == ShiftMode::standard ? "standard" : "circular"; }

struct ShiftSpec {
  ShiftMode mode = ShiftMode::standard;
  long dh = 0;
  long dw = 0;
};

/// Translates every plane by (dh, dw); vacated pixels become zero.
template <typename T>
Tensor<T> standard_shift(const Tensor<T>& x, long dh, long dw) {
  auto [planes, h, w] = planes_hw(x.shape());
  const long lh = static_cast<long>(h), lw = static_cast<long>(w);
  if (std::labs(dh) > lh || std::labs(dw) > lw) {
    throw std::invalid_argument("standard_shift: |shift| exceeds map extent");
  }
  Tensor<T> out(x.shape(), T(0));
  for (std::size_t p = 0; p < planes; ++p)
    for (long i = 0; i < lh; ++i) {
      const long si = i - dh;
      if (si < 0 || si >= lh) continue;
      for (long j = 0; j < lw; ++j) {
        const long sj = j - dw;
        if (sj >= 0 && sj < lw) out[(p * h + i) * w + j] = x[(p * h + si) * w + sj];
      }
    }
  return out;
}

/// out[..., i, j] = x[..., (i - dh) mod h, (j - dw) mod w].
template <typename T>
Tensor<T> circular_shift(const Tensor<T>& x, long dh, long dw) {
  auto [planes, h, w] = planes_hw(x.shape());
  const long lh = static_cast<long>(h), lw = static_cast<long>(w);
  Tensor<T> out(x.shape());
  for (std::size_t p = 0; p < planes; ++p)
    for (long i = 0; i < lh; ++i) {
      const long si = (((i - dh) % lh) + lh) % lh;
      for (long j = 0; j < lw; ++j) {
        const long sj = (((j - dw) % lw) + lw) % lw;
        out[(p * h + i) * w + j] = x[(p * h + si) * w + sj];
      }
    }
  return out;
}

template <typename T>
Tensor<T> apply_shift(const Tensor<T>& x, const ShiftSpec& s) {
  return s.mode == ShiftMode::standard ? standard_shift(x, s.dh, s.dw) : circular_shift(x, s.dh, s.dw);
}

/// Shifts sample b of a batch [N, ...] by shifts[b].
template <typename T>
Tensor<T> shift_batch(const Tensor<T>& x, const std::vector<ShiftSpec>& shifts) {
  const std::size_t n = x.dim(0);
  if (shifts.size() != n) throw ShapeError("shift_batch: one shift per sample required");
  Shape sample_shape(x.shape().begin() + 1, x.shape().end());
  const std::size_t stride = numel(sample_shape);
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < n; ++b) {
    Tensor<T> sample(sample_shape, std::vector<T>(x.ptr() + b * stride, x.ptr() + (b + 1) * stride));
    Tensor<T> shifted = apply_shift(sample, shifts[b]);
    std::copy(shifted.ptr(), shifted.ptr() + stride, out.ptr() + b * stride);
  }
  return out;
}

/// Draws a uniform real in [0, extent * fraction] and rounds it to the nearest integer.
inline long sample_shift_amount(std::size_t extent, double fraction, Rng& rng) {
  return std::lround(rng.uniform(0.0, static_cast<double>(extent) * fraction));
}

/**
 * Random evaluation shifts: dh ~ U(0, h * max_fraction), dw ~ U(0, w *
 * max_fraction), rounded. Draws for image i come from an independent child
 * stream, so results do not depend on evaluation order.
 */
struct ShiftSampler {
  std::uint64_t seed = 0;
  double max_fraction = 1.0 / 8.0;
  std::size_t pairs_per_image = 5;

  Rng image_stream(std::size_t image_index) const {
    return stream(seed, Stream::shifts).split(static_cast<std::uint64_t>(image_index));
  }

  ShiftSpec draw(std::size_t h, std::size_t w, ShiftMode mode, Rng& rng) const {
    const long dh = sample_shift_amount(h, max_fraction, rng);
    const long dw = sample_shift_amount(w, max_fraction, rng);
    return {mode, dh, dw};
  }
};

/// Zeroes one uniformly placed patch_size x patch_size square in every plane.
template <typename T>
Tensor<T> patch_erase(const Tensor<T>& x, std::size_t patch_size, std::uint64_t seed) {
  auto [planes, h, w] = planes_hw(x.shape());
  if (patch_size > std::min(h, w)) throw std::invalid_argument("patch_erase: patch larger than the map");
  if (patch_size == 0) return x;
  Rng rng = stream(seed, Stream::patches);
  const std::size_t top = rng.below(h - patch_size + 1);
  const std::size_t left = rng.below(w - patch_size + 1);
  Tensor<T> out = x;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = top; i < top + patch_size; ++i)
      for (std::size_t j = left; j < left + patch_size; ++j) out[(p * h + i) * w + j] = T(0);
  return out;
}

}  // namespace tips
