#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace basinlab {

// True when BASINLAB_DETERMINISTIC=1 asks for single-threaded evaluation.
inline bool deterministic_mode() {
  const char* v = std::getenv("BASINLAB_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

inline std::size_t default_jobs() {
  if (deterministic_mode()) return 1;
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results must be written
// by index; the first exception thrown is rethrown after all workers join.
template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F&& fn) {
  if (deterministic_mode()) jobs = 1;
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(n, 1));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace basinlab
