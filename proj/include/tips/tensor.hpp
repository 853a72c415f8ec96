#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <type_traits>
#include <utility>
#include <vector>

namespace tips {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible or malformed.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Allocator whose value-less construct() leaves elements uninitialized, so
/// buffers that are about to be overwritten skip the zero fill.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() = default;
  template <typename U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}
  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

/// Tag for tensors whose every element the caller writes before reading.
struct Uninitialized {};
inline constexpr Uninitialized uninitialized{};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/**
 * Dense row-major array of reals. Every extent is at least 1 and the flat
 * buffer always holds exactly product(shape) elements. A scalar is shape {1}.
 */
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : shape_{1}, data_(1, T(0)) {}

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, Uninitialized) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.resize(numel(shape_));
  }

  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_shape(shape_);
    if (data_.size() != numel(shape_)) {
      throw ShapeError("tensor of shape " + to_string(shape_) + " needs " +
                       std::to_string(numel(shape_)) + " elements, got " +
                       std::to_string(data_.size()));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  static Tensor vector(std::vector<T> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) {
    return data_[((i0 * shape_[1] + i1) * shape_[2] + i2) * shape_[3] + i3];
  }
  const T& at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) const {
    return data_[((i0 * shape_[1] + i1) * shape_[2] + i2) * shape_[3] + i3];
  }
  T& at(std::size_t i0, std::size_t i1, std::size_t i2) {
    return data_[(i0 * shape_[1] + i1) * shape_[2] + i2];
  }
  const T& at(std::size_t i0, std::size_t i1, std::size_t i2) const {
    return data_[(i0 * shape_[1] + i1) * shape_[2] + i2];
  }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor& other) const = default;

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
    for (auto e : shape) {
      if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + to_string(shape));
    }
  }

  Shape shape_;
  std::vector<T, DefaultInitAllocator<T>> data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F&& f) {
  Tensor<T> out(a.shape(), uninitialized);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F&& f, const char* what = "zip") {
  require_same_shape(a, b, what);
  Tensor<T> out(a.shape(), uninitialized);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& b) {
  require_same_shape(acc, b, "accumulate");
  T* dst = acc.ptr();
  const T* src = b.ptr();
  for (std::size_t i = 0; i < acc.size(); ++i) dst[i] += src[i];
}

/// Sequential row-major sum; the fixed order keeps results bit-reproducible.
template <typename T>
T sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return s;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, a[i] > b[i] ? a[i] - b[i] : b[i] - a[i]);
  return m;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a) {
  std::vector<To> v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v[i] = static_cast<To>(a[i]);
  return Tensor<To>(a.shape(), std::move(v));
}

/// Splits a shape of rank >= 2 into (leading planes, height, width).
inline std::tuple<std::size_t, std::size_t, std::size_t> planes_hw(const Shape& shape) {
  if (shape.size() < 2) throw ShapeError("expected a map of rank >= 2, got " + to_string(shape));
  const std::size_t h = shape[shape.size() - 2];
  const std::size_t w = shape[shape.size() - 1];
  return {numel(shape) / (h * w), h, w};
}

}  // namespace tips
