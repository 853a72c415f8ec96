#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace tips {

/**
 * Portable counter-based generator with splittable streams.
 *
 * Algorithm (pinned so every implementation reproduces the same streams):
 *   mix(z):  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
 *            z = (z ^ (z >> 27)) * 0x94D049BB133111EB
 *            return z ^ (z >> 31)
 *   next():  counter += 1; return mix(key + counter * 0x9E3779B97F4A7C15)
 *   split(s): Rng(mix(key ^ mix(s + 0x632BE59BD9B4E019)))
 *   uniform(): (next() >> 11) * 2^-53, in [0, 1)
 *   below(n):  high 64 bits of next() * n
 *   normal():  Box-Muller, cos branch, u1 = 1 - uniform(), u2 = uniform()
 *
 * This is SplitMix64 evaluated at an explicit counter, so the i-th draw of a
 * stream is a pure function of (key, i).
 */
class Rng {
 public:
  explicit constexpr Rng(std::uint64_t key = 0) noexcept : key_(key) {}

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  constexpr std::uint64_t next() noexcept {
    ++counter_;
    return mix(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// Independent child stream; does not advance this generator.
  constexpr Rng split(std::uint64_t stream) const noexcept {
    return Rng(mix(key_ ^ mix(stream + 0x632BE59BD9B4E019ULL)));
  }

  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  double normal() noexcept {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Purpose-specific stream ids derived from a run seed.
enum class Stream : std::uint64_t {
  data = 1,
  init = 2,
  shifts = 3,
  patches = 4,
  batches = 5,
  undo = 6,
  split = 7,
};

inline Rng stream(std::uint64_t seed, Stream s) { return Rng(seed).split(static_cast<std::uint64_t>(s)); }

}  // namespace tips
