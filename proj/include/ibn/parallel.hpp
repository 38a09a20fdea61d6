#ifndef IBN_PARALLEL_HPP
#define IBN_PARALLEL_HPP

#include <algorithm>
#include <functional>
#include <thread>
#include <vector>

namespace ibn {

// Process-wide worker count for the parallel loops below. 1 means run inline.
void set_num_threads(int n);
int num_threads();

// Splits [0, n) into contiguous chunks, one per worker, and runs
// fn(chunk, begin, end) on each. Chunk boundaries depend only on n and the
// thread count, so per-chunk reductions merged in chunk order are
// reproducible for a fixed thread count.
template <typename Fn>
void parallel_chunks(int n, Fn&& fn) {
  const int workers = std::max(1, std::min(num_threads(), n));
  if (workers == 1) {
    fn(0, 0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int c = 0; c < workers; ++c) {
    const int begin = static_cast<int>(static_cast<long>(n) * c / workers);
    const int end = static_cast<int>(static_cast<long>(n) * (c + 1) / workers);
    pool.emplace_back([&fn, c, begin, end] { fn(c, begin, end); });
  }
  for (auto& t : pool) t.join();
}

inline int chunk_count(int n) { return std::max(1, std::min(num_threads(), n)); }

}  // namespace ibn

#endif  // IBN_PARALLEL_HPP
