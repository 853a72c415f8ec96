#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "tips/rng.hpp"
#include "tips/tensor.hpp"

namespace tips {

/// Base class for every dataset ingestion failure.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IdxError : public DataError {
 public:
  enum class Kind { io, wrong_magic, truncated, count_mismatch, bad_dimensions };
  IdxError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

template <typename T>
struct Dataset {
  /// [n, c, h, w], values in [0, 1].
  Tensor<T> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  void validate() const {
    if (images.rank() != 4 || images.dim(0) != labels.size()) {
      throw DataError("dataset: " + std::to_string(labels.size()) + " labels for images " + to_string(images.shape()));
    }
    for (auto l : labels)
      if (l >= num_classes) throw DataError("dataset: label " + std::to_string(l) + " >= num_classes");
    for (T v : images.data())
      if (!(v >= T(0) && v <= T(1))) throw DataError("dataset: pixel outside [0,1]");
  }
};

/// Copies the listed samples into a new batch tensor.
template <typename T>
Dataset<T> subset(const Dataset<T>& d, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw DataError("subset: empty index list");
  Shape s = d.images.shape();
  const std::size_t stride = numel(s) / s[0];
  s[0] = idx.size();
  Tensor<T> images(s);
  std::vector<std::size_t> labels(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(d.images.ptr() + idx[i] * stride, d.images.ptr() + (idx[i] + 1) * stride, images.ptr() + i * stride);
    labels[i] = d.labels[idx[i]];
  }
  return {std::move(images), std::move(labels), d.num_classes, d.provenance};
}

// ---------------------------------------------------------------------------
// Synthetic translatable shapes.

enum class ShapeType : std::size_t { square = 0, cross = 1, disk = 2, ring = 3 };

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t n_train = 4000;
  std::size_t n_test = 1000;
  std::size_t image_size = 32;
  std::size_t num_classes = 4;
  /// Shape radius in pixels, drawn uniformly from [min_scale, max_scale].
  double min_scale = 3.0;
  double max_scale = 8.0;
  /// Minimum distance in pixels between a shape's extent and the border.
  double margin = 1.0;
  /// Standard deviation of additive Gaussian pixel noise.
  double noise = 0.15;
};

namespace detail {

inline bool inside_shape(ShapeType t, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (t) {
    case ShapeType::square: return ax <= 0.8 * r && ay <= 0.8 * r;
    case ShapeType::cross: return (ax <= r && ay <= r / 3.0) || (ay <= r && ax <= r / 3.0);
    case ShapeType::disk: return dx * dx + dy * dy <= r * r;
    case ShapeType::ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
  }
  return false;
}

inline double quantize_unit(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return std::round(v * 255.0) / 255.0;
}

}  // namespace detail

/**
 * One anti-aliased shape per image (4x4 supersampling), class = shape type
 * assigned round-robin, uniformly placed so it fits within the margin,
 * random contrast, additive noise. Pixels are quantized to k/255 so an IDX
 * export reloads bit-identically.
 */
template <typename T>
Dataset<T> gen_synthetic_split(const SyntheticSpec& spec, std::size_t n, std::uint64_t split_id) {
  if (spec.num_classes < 1 || spec.num_classes > 4) throw DataError("synthetic: num_classes must be in [1,4]");
  if (n < spec.num_classes) throw DataError("synthetic: need at least one image per class");
  if (spec.min_scale <= 0 || spec.max_scale < spec.min_scale) throw DataError("synthetic: bad scale range");
  const double size = static_cast<double>(spec.image_size);
  if (2.0 * (spec.max_scale + spec.margin) > size) {
    throw DataError("synthetic: shape diameter " + std::to_string(2 * spec.max_scale) + " plus margin exceeds image size");
  }
  Rng rng = stream(spec.seed, Stream::data).split(split_id);
  const std::size_t sz = spec.image_size;
  Tensor<T> images({n, 1, sz, sz});
  std::vector<std::size_t> labels(n);
  constexpr int sub = 4;
  for (std::size_t i = 0; i < n; ++i) {
    const auto type = static_cast<ShapeType>(i % spec.num_classes);
    labels[i] = i % spec.num_classes;
    const double r = rng.uniform(spec.min_scale, spec.max_scale);
    const double lo = spec.margin + r, hi = size - spec.margin - r;
    const double cy = rng.uniform(lo, hi), cx = rng.uniform(lo, hi);
    const double fg = rng.uniform(0.5, 1.0);
    const double bg = rng.uniform(0.0, 0.2);
    for (std::size_t y = 0; y < sz; ++y)
      for (std::size_t x = 0; x < sz; ++x) {
        int covered = 0;
        for (int a = 0; a < sub; ++a)
          for (int b = 0; b < sub; ++b) {
            const double py = static_cast<double>(y) + (a + 0.5) / sub;
            const double px = static_cast<double>(x) + (b + 0.5) / sub;
            covered += detail::inside_shape(type, px - cx, py - cy, r) ? 1 : 0;
          }
        const double cov = static_cast<double>(covered) / (sub * sub);
        const double v = bg + (fg - bg) * cov + spec.noise * rng.normal();
        images.at(i, 0, y, x) = static_cast<T>(detail::quantize_unit(v));
      }
  }
  Dataset<T> d{std::move(images), std::move(labels), spec.num_classes,
               "synthetic:seed=" + std::to_string(spec.seed) + ":split=" + std::to_string(split_id)};
  return d;
}

template <typename T>
struct SyntheticData {
  Dataset<T> train;
  Dataset<T> test;
};

template <typename T>
SyntheticData<T> gen_synthetic(const SyntheticSpec& spec) {
  return {gen_synthetic_split<T>(spec, spec.n_train, 0), gen_synthetic_split<T>(spec, spec.n_test, 1)};
}

// ---------------------------------------------------------------------------
// IDX binary format (big-endian header, u8 payload).

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw IdxError(IdxError::Kind::truncated, path + ": truncated header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint64_t fnv1a(const std::vector<std::uint8_t>& b, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (auto c : b) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Parsed IDX payload: dimension sizes plus raw bytes.
struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;
};

inline IdxArray parse_idx(const std::vector<std::uint8_t>& b, std::uint32_t magic, std::size_t ndims,
                          const std::string& path) {
  const std::uint32_t got = detail::read_be32(b, 0, path);
  if (got != magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, ": magic 0x%08X, expected 0x%08X", got, magic);
    throw IdxError(IdxError::Kind::wrong_magic, path + buf);
  }
  IdxArray a;
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    a.dims.push_back(detail::read_be32(b, 4 + 4 * d, path));
    if (a.dims.back() == 0) throw IdxError(IdxError::Kind::bad_dimensions, path + ": zero dimension");
    count *= a.dims.back();
  }
  const std::size_t header = 4 + 4 * ndims;
  if (b.size() < header + count) {
    throw IdxError(IdxError::Kind::truncated, path + ": expected " + std::to_string(count) + " payload bytes, found " +
                                                  std::to_string(b.size() - header));
  }
  a.bytes.assign(b.begin() + static_cast<long>(header), b.begin() + static_cast<long>(header + count));
  return a;
}

inline std::vector<std::uint8_t> encode_idx(const IdxArray& a, std::uint32_t magic) {
  std::vector<std::uint8_t> out;
  detail::put_be32(out, magic);
  for (auto d : a.dims) detail::put_be32(out, d);
  out.insert(out.end(), a.bytes.begin(), a.bytes.end());
  return out;
}

/// Loads an IDX image file (u8, 3 dims) and label file (u8, 1 dim).
template <typename T>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto ib = detail::read_file(images_path);
  const auto lb = detail::read_file(labels_path);
  const IdxArray im = parse_idx(ib, kIdxImagesMagic, 3, images_path);
  const IdxArray lab = parse_idx(lb, kIdxLabelsMagic, 1, labels_path);
  if (im.dims[0] != lab.dims[0]) {
    throw IdxError(IdxError::Kind::count_mismatch, std::to_string(im.dims[0]) + " images but " +
                                                       std::to_string(lab.dims[0]) + " labels");
  }
  const std::size_t n = im.dims[0], h = im.dims[1], w = im.dims[2];
  Tensor<T> images({n, 1, h, w});
  for (std::size_t i = 0; i < im.bytes.size(); ++i) images[i] = static_cast<T>(im.bytes[i]) / T(255);
  std::vector<std::size_t> labels(lab.bytes.begin(), lab.bytes.end());
  const std::size_t classes = *std::max_element(labels.begin(), labels.end()) + 1;
  char digest[32];
  std::snprintf(digest, sizeof digest, "%016llx",
                static_cast<unsigned long long>(detail::fnv1a(lb, detail::fnv1a(ib))));
  return {std::move(images), std::move(labels), classes, std::string("idx:") + digest};
}

/// Serializes a single-channel dataset back to IDX byte streams.
template <typename T>
std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>> encode_idx(const Dataset<T>& d) {
  if (d.images.rank() != 4 || d.channels() != 1) throw DataError("IDX export needs single-channel [n,1,h,w] images");
  if (d.num_classes > 256) throw DataError("IDX labels are single bytes");
  IdxArray im{{static_cast<std::uint32_t>(d.size()), static_cast<std::uint32_t>(d.height()),
               static_cast<std::uint32_t>(d.width())},
              {}};
  im.bytes.reserve(d.images.size());
  for (T v : d.images.data()) {
    im.bytes.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0)));
  }
  IdxArray lab{{static_cast<std::uint32_t>(d.size())}, {}};
  for (auto l : d.labels) lab.bytes.push_back(static_cast<std::uint8_t>(l));
  return {encode_idx(im, kIdxImagesMagic), encode_idx(lab, kIdxLabelsMagic)};
}

template <typename T>
void write_idx(const Dataset<T>& d, const std::string& images_path, const std::string& labels_path) {
  auto [ib, lb] = encode_idx(d);
  for (auto& [path, bytes] : {std::pair{images_path, &ib}, std::pair{labels_path, &lb}}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IdxError(IdxError::Kind::io, "cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes->data()), static_cast<std::streamsize>(bytes->size()));
  }
}

// ---------------------------------------------------------------------------
// Mini-batching.

template <typename T>
struct Batch {
  Tensor<T> images;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> indices;
};

/// Fisher-Yates permutation of [0, n) drawn from `rng`.
inline std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

/// Sequential mini-batches over a fixed (optionally shuffled) order; the last
/// partial batch is included.
template <typename T>
class BatchIterator {
 public:
  BatchIterator(const Dataset<T>& d, std::size_t batch_size, std::uint64_t seed, bool shuffle)
      : data_(&d), batch_size_(batch_size) {
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    if (shuffle) {
      Rng rng = stream(seed, Stream::batches);
      order_ = permutation(d.size(), rng);
    } else {
      order_.resize(d.size());
      std::iota(order_.begin(), order_.end(), std::size_t{0});
    }
  }

  bool next(Batch<T>& out) {
    if (pos_ >= order_.size()) return false;
    const std::size_t end = std::min(order_.size(), pos_ + batch_size_);
    std::vector<std::size_t> idx(order_.begin() + static_cast<long>(pos_), order_.begin() + static_cast<long>(end));
    Dataset<T> sub = subset(*data_, idx);
    out = Batch<T>{std::move(sub.images), std::move(sub.labels), std::move(idx)};
    pos_ = end;
    return true;
  }

  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const Dataset<T>* data_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

template <typename T>
BatchIterator<T> batches(const Dataset<T>& d, std::size_t batch_size, std::uint64_t seed, bool shuffle) {
  return BatchIterator<T>(d, batch_size, seed, shuffle);
}

}  // namespace tips
