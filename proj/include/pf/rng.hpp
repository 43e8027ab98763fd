#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace pf {

/// Deterministic random source used everywhere in the library.
///
/// All distribution transforms are written out by hand so that a given seed
/// produces the same stream on every platform and standard library.  (The
/// C++ standard pins the mt19937_64 engine output but *not* the distribution
/// adaptors, which differ between libstdc++ and libc++.)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Raw 64 random bits.
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 bits of precision.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box–Muller (no state carried between calls).
  double normal() {
    // Guard against log(0): uniform01 can return exactly 0.
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Normal(0, stddev) resampled until it lands within two standard
  /// deviations — the usual transformer weight-init distribution.
  double truncated_normal(double stddev) {
    for (;;) {
      const double v = normal();
      if (v >= -2.0 && v <= 2.0) return v * stddev;
    }
  }

  /// Unbiased integer in [0, n).  Rejection sampling keeps the stream
  /// deterministic and free of modulo bias.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::runtime_error("Rng::uniform_int: n must be > 0");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  /// k distinct indices drawn uniformly from [0, n), in draw order
  /// (partial Fisher–Yates over an index table).
  std::vector<std::size_t> sample_without_replacement(std::size_t n,
                                                      std::size_t k) {
    if (k > n) {
      throw std::runtime_error(
          "Rng::sample_without_replacement: k exceeds population size");
    }
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(uniform_int(n - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

  /// Mix a seed with a stream index into a new well-separated seed.
  /// Splitmix64-style finalizer, so nearby (seed, stream) pairs land far
  /// apart in seed space.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Derive an independent stream from this seed and a stream index.
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    return Rng(mix(seed, stream));
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace pf
