#pragma once

#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace revcol {

// Error taxonomy used across the library. The CLI maps these onto exit
// codes: ConfigError/ValueError/ShapeError -> 1, IoError -> 2.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ValueError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

inline int max_threads() {
  static const int n = [] {
    if (const char* env = std::getenv("REVCOL_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v >= 1) return static_cast<int>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return n;
}

// Splits [0, n) into contiguous chunks, one worker per chunk. Every chunk
// writes a disjoint output range, so the result does not depend on the
// thread count; reductions inside one element stay sequential.
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn, std::int64_t grain = 1024) {
  const int threads = max_threads();
  if (threads <= 1 || n < 2 * grain) {
    fn(std::int64_t{0}, n);
    return;
  }
  const std::int64_t chunks = std::min<std::int64_t>(threads, (n + grain - 1) / grain);
  const std::int64_t step = (n + chunks - 1) / chunks;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(chunks - 1));
  for (std::int64_t c = 1; c < chunks; ++c) {
    const std::int64_t lo = c * step;
    const std::int64_t hi = std::min(n, lo + step);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(std::int64_t{0}, std::min(n, step));
  for (auto& t : pool) t.join();
}

}  // namespace revcol
