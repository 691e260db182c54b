#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace fido {

/// SplitMix64 finalizer, used to derive independent stream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed of the `stream`-th child of `seed`.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

/// Reproducible random source: std::mt19937_64 (a fully specified engine)
/// seeded with splitmix64(seed). The conversions to real numbers are
/// implemented here rather than through <random> distributions, whose
/// algorithms are implementation-defined, so streams agree across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform strictly inside (0, 1) once rounded to Scalar; draws that land
  /// on 0 or 1 are discarded and redrawn.
  template <typename Scalar>
  Scalar open_unit() {
    for (;;) {
      const Scalar u = Scalar(uniform());
      if (u > Scalar(0) && u < Scalar(1)) return u;
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fido
