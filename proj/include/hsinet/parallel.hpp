#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace hsinet {

// Intra-op thread cap. HSINET_THREADS=0 (or 1) selects serial execution.
// Work is always partitioned over independent output elements, so every
// element sees the same reduction order regardless of the thread count.
inline int& thread_override() {
  static int value = -1;
  return value;
}

inline void set_threads(int n) { thread_override() = n; }

inline int thread_count() {
  if (thread_override() >= 0) return std::max(1, thread_override());
  static const int from_env = [] {
    if (const char* env = std::getenv("HSINET_THREADS")) {
      try {
        return std::max(1, std::stoi(env));
      } catch (...) {
        return 1;
      }
    }
    return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
  }();
  return from_env;
}

// Calls fn(begin, end) over contiguous chunks of [0, count). `work` is a
// rough per-index cost used to skip threading for small jobs.
template <class Fn>
void parallel_for(std::size_t count, std::size_t work, Fn&& fn) {
  const int threads = thread_count();
  constexpr std::size_t kMinWork = 1 << 16;
  if (threads <= 1 || count < 2 || count * work < kMinWork) {
    fn(std::size_t{0}, count);
    return;
  }
  const std::size_t chunks = std::min<std::size_t>(static_cast<std::size_t>(threads), count);
  const std::size_t step = (count + chunks - 1) / chunks;
  std::vector<std::thread> pool;
  pool.reserve(chunks - 1);
  for (std::size_t t = 1; t < chunks; ++t) {
    const std::size_t b = t * step;
    const std::size_t e = std::min(count, b + step);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(count, step));
  for (auto& th : pool) th.join();
}

}  // namespace hsinet
