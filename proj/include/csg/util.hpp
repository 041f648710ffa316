#pragma once

#include <atomic>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace csg {

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Work is handed out
// through an atomic counter; callers that need determinism must make fn(i)
// depend only on i. Exceptions are captured and rethrown on the caller.
template <typename Fn>
void parallel_for(int n, int jobs, Fn&& fn) {
  if (n <= 0) return;
  if (jobs < 1) jobs = 1;
  if (jobs == 1 || n == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int workers = std::min(jobs, n);
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int wkr = 0; wkr < workers; ++wkr) {
    pool.emplace_back([&, wkr] {
      try {
        while (true) {
          const int i = next.fetch_add(1);
          if (i >= n) break;
          fn(i);
        }
      } catch (...) {
        errors[static_cast<std::size_t>(wkr)] = std::current_exception();
      }
    });
  }
  for (std::thread& th : pool) th.join();
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

// Shortest decimal form that round-trips a double exactly.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace csg
