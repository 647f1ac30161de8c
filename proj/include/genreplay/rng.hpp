#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "genreplay/tensor.hpp"

namespace genreplay {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic random source. Distributions are implemented on top of the
/// raw 64-bit stream so traces do not depend on the standard library's
/// distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(splitmix64(seed)) {}

  uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  /// Uniform integer in [0, n).
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  Tensor normal_tensor(std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (int i = 0; i < t.size(); ++i) t[i] = normal();
    return t;
  }

  Tensor uniform_tensor(std::vector<int> shape, double a, double b) {
    Tensor t(std::move(shape));
    for (int i = 0; i < t.size(); ++i) t[i] = uniform(a, b);
    return t;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = next_u64() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    shuffle(p);
    return p;
  }

  /// Derives an independent stream; `tag` distinguishes consumers.
  Rng split(uint64_t tag) { return Rng(splitmix64(next_u64() ^ splitmix64(tag))); }

  /// Derives a stream from a base seed and tag without consuming state.
  static Rng from(uint64_t seed, uint64_t tag) { return Rng(splitmix64(seed) ^ splitmix64(tag)); }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace genreplay
