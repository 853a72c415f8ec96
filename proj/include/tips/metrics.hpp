#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tips/model.hpp"
#include "tips/nn.hpp"
#include "tips/shift.hpp"

namespace tips {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by pearson_r when either list is constant.
class UndefinedCorrelation : public MetricError {
 public:
  using MetricError::MetricError;
};

/// Sample Pearson correlation.
inline double pearson_r(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw MetricError("pearson_r: lists differ in length");
  if (xs.size() < 2) throw MetricError("pearson_r: need at least two points");
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0 || syy == 0) throw UndefinedCorrelation("pearson_r: zero variance, correlation undefined");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Copies samples [begin, end) of a batch into a new tensor.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.dim(0)) throw ShapeError("slice_batch: bad range");
  Shape s = x.shape();
  const std::size_t stride = x.size() / s[0];
  s[0] = end - begin;
  return Tensor<T>(s, std::vector<T>(x.ptr() + begin * stride, x.ptr() + end * stride));
}

/// Copies sample i as a single-sample tensor [C, H, W].
template <typename T>
Tensor<T> sample_of(const Tensor<T>& x, std::size_t i) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  const std::size_t stride = numel(s);
  return Tensor<T>(s, std::vector<T>(x.ptr() + i * stride, x.ptr() + (i + 1) * stride));
}

/// Stacks equally shaped [C, H, W] samples into [N, C, H, W].
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("stack: empty list");
  Shape s{xs.size()};
  s.insert(s.end(), xs[0].shape().begin(), xs[0].shape().end());
  std::vector<T> data;
  data.reserve(numel(s));
  for (const auto& x : xs) {
    require_same_shape(x, xs[0], "stack");
    data.insert(data.end(), x.ptr(), x.ptr() + x.size());
  }
  return Tensor<T>(s, std::move(data));
}

/// Argmax predictions of a model, evaluated in chunks without graph recording.
template <typename T>
struct ModelPredictor {
  const Model<T>& model;
  std::size_t chunk = 250;

  std::vector<std::size_t> operator()(const Tensor<T>& x) const {
    std::vector<std::size_t> out;
    out.reserve(x.dim(0));
    for (std::size_t b = 0; b < x.dim(0); b += chunk) {
      const std::size_t e = std::min(x.dim(0), b + chunk);
      const auto p = argmax_rows(model.logits(slice_batch(x, b, e)));
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }
};

template <typename Predict, typename T>
double accuracy(const Predict& predict, const Tensor<T>& images, const std::vector<std::size_t>& labels) {
  if (images.dim(0) != labels.size()) throw MetricError("accuracy: label/image count mismatch");
  const auto p = predict(images);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < p.size(); ++i) hit += p[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(p.size());
}

struct ShiftAgreement {
  double consistency = 0;
  double fidelity = 0;
  std::size_t samples = 0;
};

/**
 * K shift pairs per image drawn from the sampler; consistency is the fraction
 * of pairs with equal predictions, fidelity additionally requires both to
 * equal the label. Without labels fidelity is left at 0.
 */
template <typename Predict, typename T>
ShiftAgreement shift_agreement(const Predict& predict, const Tensor<T>& images, const std::vector<std::size_t>* labels,
                               const ShiftSampler& sampler, ShiftMode mode) {
  if (images.rank() != 4) throw ShapeError("shift_agreement: images must be [N,C,H,W]");
  const std::size_t n = images.dim(0), h = images.dim(2), w = images.dim(3);
  if (labels && labels->size() != n) throw MetricError("fidelity: label/image count mismatch");
  if (sampler.pairs_per_image == 0) throw MetricError("shift_agreement: pairs_per_image must be >= 1");
  const std::size_t k = sampler.pairs_per_image;
  std::size_t agree = 0, correct = 0;
  constexpr std::size_t per_chunk = 50;
  for (std::size_t b = 0; b < n; b += per_chunk) {
    const std::size_t e = std::min(n, b + per_chunk);
    std::vector<Tensor<T>> first, second;
    for (std::size_t i = b; i < e; ++i) {
      Rng rng = sampler.image_stream(i);
      const Tensor<T> x = sample_of(images, i);
      for (std::size_t j = 0; j < k; ++j) {
        const ShiftSpec s1 = sampler.draw(h, w, mode, rng);
        const ShiftSpec s2 = sampler.draw(h, w, mode, rng);
        first.push_back(apply_shift(x, s1));
        second.push_back(apply_shift(x, s2));
      }
    }
    const auto p1 = predict(stack(first));
    const auto p2 = predict(stack(second));
    for (std::size_t q = 0; q < p1.size(); ++q) {
      if (p1[q] != p2[q]) continue;
      ++agree;
      if (labels && p1[q] == (*labels)[b + q / k]) ++correct;
    }
  }
  const double total = static_cast<double>(n * k);
  return {agree / total, correct / total, n * k};
}

template <typename Predict, typename T>
double consistency(const Predict& predict, const Tensor<T>& images, const ShiftSampler& sampler, ShiftMode mode) {
  if (images.rank() != 4 || images.size() == 0) throw MetricError("consistency: empty image set");
  return shift_agreement(predict, images, static_cast<const std::vector<std::size_t>*>(nullptr), sampler, mode).consistency;
}

template <typename Predict, typename T>
double fidelity(const Predict& predict, const Tensor<T>& images, const std::vector<std::size_t>& labels,
                const ShiftSampler& sampler, ShiftMode mode) {
  return shift_agreement(predict, images, &labels, sampler, mode).fidelity;
}

/**
 * Agreement between f(x) and f(shift(x, d, d)) for d = 0 .. floor(h * max_fraction).
 * Entry d = 0 compares identical inputs.
 */
template <typename Predict, typename T>
std::vector<double> magnitude_curve(const Predict& predict, const Tensor<T>& images, double max_fraction, ShiftMode mode) {
  const std::size_t n = images.dim(0), h = images.dim(2);
  const auto base = predict(images);
  const auto dmax = static_cast<long>(std::floor(static_cast<double>(h) * max_fraction));
  std::vector<double> curve;
  for (long d = 0; d <= dmax; ++d) {
    const auto p = d == 0 ? base : predict(apply_shift(images, ShiftSpec{mode, d, d}));
    std::size_t same = 0;
    for (std::size_t i = 0; i < n; ++i) same += p[i] == base[i];
    curve.push_back(static_cast<double>(same) / static_cast<double>(n));
  }
  return curve;
}

/// Erases one patch per image, placed from a per-image seed.
template <typename T>
Tensor<T> patch_erase_batch(const Tensor<T>& images, std::size_t patch_size, std::uint64_t seed) {
  std::vector<Tensor<T>> out;
  const Rng base = stream(seed, Stream::patches);
  for (std::size_t i = 0; i < images.dim(0); ++i) {
    out.push_back(patch_erase(sample_of(images, i), patch_size, base.split(i).next()));
  }
  return stack(out);
}

struct MsbReport {
  /// Empty for models without pooling layers.
  std::vector<double> per_layer;
  std::optional<double> msb;
  std::size_t n_images = 0;
  std::string descriptor;

  bool applicable() const { return msb.has_value(); }
};

/// Window-max hit fraction per pooling layer, averaged over the images.
template <typename T>
MsbReport model_msb(const Model<T>& model, const Tensor<T>& images, std::string descriptor = "", double tol = 1e-6) {
  MsbReport r;
  r.n_images = images.dim(0);
  r.descriptor = std::move(descriptor);
  const std::size_t layers = model.num_pooling_layers();
  if (layers == 0) return r;
  std::vector<double> sum(layers, 0.0);
  constexpr std::size_t chunk = 100;
  NoGradGuard guard;
  for (std::size_t b = 0; b < r.n_images; b += chunk) {
    const std::size_t e = std::min(r.n_images, b + chunk);
    const auto fwd = model.forward(slice_batch(images, b, e), true);
    for (std::size_t l = 0; l < layers; ++l) {
      const auto& t = fwd.pools.at(l);
      sum[l] += measure_window_max_hits(t.input, t.output, model.config().stride, tol) * static_cast<double>(e - b);
    }
  }
  double total = 0;
  for (double s : sum) {
    r.per_layer.push_back(s / static_cast<double>(r.n_images));
    total += r.per_layer.back();
  }
  r.msb = total / static_cast<double>(layers);
  return r;
}

struct PatchResult {
  std::size_t patch_size = 0;
  double consistency = 0;
  double fidelity = 0;
};

struct MetricsReport {
  double accuracy = 0;
  ShiftAgreement standard;
  ShiftAgreement circular;
  std::vector<double> standard_curve;
  std::vector<double> circular_curve;
  MsbReport msb;
  std::vector<PatchResult> patches;
  std::size_t n_images = 0;
  std::size_t pairs_per_image = 0;
  std::uint64_t seed = 0;
};

/// Full evaluation of a model on a labelled image set.
template <typename T>
MetricsReport evaluate_model(const Model<T>& model, const Tensor<T>& images, const std::vector<std::size_t>& labels,
                             const ShiftSampler& sampler, const std::vector<std::size_t>& patch_sizes = {},
                             ShiftMode patch_mode = ShiftMode::standard) {
  if (images.rank() != 4) throw ShapeError("evaluate: images must be [N,C,H,W]");
  if (labels.size() != images.dim(0)) throw MetricError("evaluate: label/image count mismatch");
  ModelPredictor<T> predict{model};
  MetricsReport r;
  r.n_images = images.dim(0);
  r.pairs_per_image = sampler.pairs_per_image;
  r.seed = sampler.seed;
  r.accuracy = accuracy(predict, images, labels);
  r.standard = shift_agreement(predict, images, &labels, sampler, ShiftMode::standard);
  r.circular = shift_agreement(predict, images, &labels, sampler, ShiftMode::circular);
  r.standard_curve = magnitude_curve(predict, images, sampler.max_fraction, ShiftMode::standard);
  r.circular_curve = magnitude_curve(predict, images, sampler.max_fraction, ShiftMode::circular);
  r.msb = model_msb(model, images);
  for (std::size_t p : patch_sizes) {
    const Tensor<T> erased = patch_erase_batch(images, p, sampler.seed);
    const auto a = shift_agreement(predict, erased, &labels, sampler, patch_mode);
    r.patches.push_back({p, a.consistency, a.fidelity});
  }
  return r;
}

}  // namespace tips
