#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace mz {

/// Order-preserving parallel map: results land in input order no matter how
/// many workers run, so thread count never changes downstream reductions.
/// threads <= 1 runs inline.
template <typename Result, typename Fn>
std::vector<Result> parallel_map(std::size_t n, int threads, Fn&& fn) {
  std::vector<Result> results(n);
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) results[i] = fn(i);
    return results;
  }
  const int workers = static_cast<int>(std::min<std::size_t>(threads, n));
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) results[i] = fn(i);
    });
  }
  for (auto& t : pool) t.join();
  return results;
}

}  // namespace mz
