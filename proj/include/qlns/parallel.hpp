#pragma once

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

// Index-sharded parallel loop. Results must be written into per-index slots by
// the callee; combined with per-index derived seeds this keeps every output
// independent of the worker count and of scheduling.

namespace qlns {

inline int worker_count() {
  if (const char* env = std::getenv("QLNS_WORKERS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, int workers = worker_count()) {
  if (n == 0) return;
  if (workers <= 1 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const int used = static_cast<int>(std::min<std::size_t>(n, static_cast<std::size_t>(workers)));
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(used));
  pool.reserve(static_cast<std::size_t>(used));
  for (int t = 0; t < used; ++t) {
    pool.emplace_back([&, t]() {
      try {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace qlns
