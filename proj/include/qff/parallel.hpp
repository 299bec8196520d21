#pragma once

// Deterministic work distribution: items are claimed from an atomic counter
// and every item writes only to its own output slot, so results never depend
// on the thread count. Exceptions are rethrown for the lowest failing index.

#include <atomic>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace qff {

inline unsigned resolve_threads(int requested) {
  if (requested > 0) return static_cast<unsigned>(requested);
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

inline void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& body) {
  const unsigned n_threads = std::min<std::size_t>(resolve_threads(threads), count == 0 ? 1 : count);
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(n_threads);
  for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  for (auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
}

}  // namespace qff
