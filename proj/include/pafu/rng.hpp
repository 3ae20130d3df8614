#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "pafu/tensor.hpp"

namespace pafu {

/// Explicit seeded noise source. `split` derives an independent child stream
/// from the parent's seed and a stream id, so work can be partitioned without
/// sharing generator state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }

  Rng split(std::uint64_t stream) const { return Rng(mix(seed_ ^ mix(stream + 0x632be59bd9b4e019ULL))); }

  /// Uniform in [0, 1).
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_); }

  /// Standard Gumbel(0,1) via -log(-log(u)), u clamped to [eps, 1-eps].
  double gumbel(double eps = 1e-10) {
    const double u = eps + (1.0 - 2.0 * eps) * uniform();
    return -std::log(-std::log(u));
  }

 private:
  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

template <typename T = float>
BasicTensor<T> randn(Shape shape, Rng& rng, double stddev = 1.0) {
  BasicTensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <typename T = float>
BasicTensor<T> rand_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  BasicTensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

}  // namespace pafu
