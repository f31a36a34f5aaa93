#pragma once

#include <cstddef>
#include <cstdlib>
#include <thread>
#include <vector>

namespace flashsvd {

// Worker cap: FLASHSVD_THREADS if set (minimum 1), else hardware concurrency.
inline std::size_t thread_cap() {
  if (const char* env = std::getenv("FLASHSVD_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
    return 1;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Runs fn(i) for i in [0, n). Work items must be independent; each writes only
// its own output slice, so results do not depend on the worker count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  std::size_t workers = thread_cap();
  if (workers > n) workers = n;
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace flashsvd
