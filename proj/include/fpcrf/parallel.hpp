#pragma once

#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace fpcrf {

// Runs fn(begin, end) over contiguous chunks of [0, n). Each index is owned by
// exactly one chunk, so results are bit-identical for any thread count as long
// as fn only writes to its own indices. A throwing worker does not bring the
// process down: the first exception (lowest chunk) is rethrown after the join.
inline void parallel_for(int n, int threads, const std::function<void(int, int)>& fn) {
  if (n <= 0) return;
  if (threads <= 1 || n == 1) {
    fn(0, n);
    return;
  }
  const int workers = std::min(threads, n);
  const int chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  pool.reserve(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t) {
    const int begin = t * chunk;
    const int end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, &errors, t, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace fpcrf
