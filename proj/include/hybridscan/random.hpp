#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "hybridscan/tensor.hpp"

namespace hybridscan {

/// Seeded generator whose derived draws (uniform, normal, integer ranges) are
/// computed here rather than by <random> distributions, so streams are
/// identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n <= 1 ? 0 : engine_() % n; }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool coin(double p = 0.5) { return uniform() < p; }

  /// Derives an independent child stream, e.g. one per case or per layer.
  Rng split() { return Rng(engine_() ^ 0x9E3779B97F4A7C15ULL); }

 private:
  std::mt19937_64 engine_;
};

template <typename Scalar>
Tensor<Scalar> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  return t;
}

template <typename Scalar>
Tensor<Scalar> normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(stddev * rng.normal());
  return t;
}

}  // namespace hybridscan
