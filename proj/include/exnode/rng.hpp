#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "exnode/array.hpp"

namespace exnode {

/// Counter-based 64-bit generator.
///
/// Output k of a stream with key K is splitmix64_mix(K + (k + 1) * 0x9E3779B97F4A7C15),
/// i.e. the SplitMix64 sequence seeded with K. The state is just (key, counter), so
/// any implementation of the mixer reproduces the stream bit-for-bit.
/// Doubles take the top 53 bits; normals use Box-Muller with the cosine branch only.
class Rng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit Rng(std::uint64_t seed = 0) : key_(seed) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * kGamma); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Lemire-style rejection keeps the stream platform independent.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double rademacher() { return (next_u64() >> 63) ? 1.0 : -1.0; }

  DenseArray normal_array(const Shape& shape) {
    DenseArray a(shape);
    for (double& v : a.values()) v = normal();
    return a;
  }

  DenseArray uniform_array(const Shape& shape, double lo, double hi) {
    DenseArray a(shape);
    for (double& v : a.values()) v = uniform(lo, hi);
    return a;
  }

  DenseArray rademacher_array(const Shape& shape) {
    DenseArray a(shape);
    for (double& v : a.values()) v = rademacher();
    return a;
  }

  /// Independent child stream; deterministic in (key, stream id), not in counter.
  Rng split(std::uint64_t stream) const { return Rng(mix(key_ ^ mix(stream + kGamma))); }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[below(i)]);
    return p;
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace exnode
