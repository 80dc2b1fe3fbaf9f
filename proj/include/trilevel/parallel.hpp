#ifndef TRILEVEL_PARALLEL_HPP
#define TRILEVEL_PARALLEL_HPP

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace trilevel {

/// Kernel thread cap: TRILEVEL_THREADS if set to a positive integer, else the machine's cores.
inline std::size_t kernel_threads() {
  static const std::size_t cached = [] {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("TRILEVEL_THREADS")) {
      try {
        long v = std::stol(env);
        if (v > 0) return static_cast<std::size_t>(v);
      } catch (...) {
      }
    }
    return hw;
  }();
  return cached;
}

// Splits [0, n) into contiguous chunks, one per thread. Each index is handled by
// exactly one thread, so results do not depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t work_per_item, Fn&& fn) {
  constexpr std::size_t kMinWork = std::size_t{1} << 17;
  std::size_t threads = std::min(kernel_threads(), n);
  if (threads <= 1 || n * work_per_item < kMinWork) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (std::size_t i = 0; i < std::min(n, chunk); ++i) fn(i);
  for (auto& th : pool) th.join();
}

}  // namespace trilevel

#endif  // TRILEVEL_PARALLEL_HPP
