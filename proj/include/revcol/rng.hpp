#pragma once

#include <cmath>
#include <cstdint>

#include "revcol/tensor.hpp"

namespace revcol {

// splitmix64 stream. Integer-only state transitions, so identical seeds
// yield identical sequences on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t next_below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  // Box-Muller without cached state: each call consumes two uniforms.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  // Derives an independent stream; used for per-epoch shuffles and
  // per-component initialization.
  Rng fork(std::uint64_t salt) {
    Rng r(next_u64() ^ (salt * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL));
    return r;
  }

  template <class T>
  void fill_normal(Tensor<T>& t, double mean, double std) {
    T* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(normal(mean, std));
  }

  template <class T>
  void fill_uniform(Tensor<T>& t, double lo, double hi) {
    T* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(uniform(lo, hi));
  }

  template <class T>
  Tensor<T> normal_tensor(Shape dims, double mean = 0.0, double std = 1.0) {
    auto t = Tensor<T>::zeros(std::move(dims));
    fill_normal(t, mean, std);
    return t;
  }

 private:
  std::uint64_t state_;
};

}  // namespace revcol
