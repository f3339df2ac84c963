#include "translab/parallel.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

namespace translab {

int default_worker_count() {
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void run_parallel(int workers, std::vector<std::function<void()>> tasks) {
  if (tasks.empty()) return;
  if (workers > static_cast<int>(tasks.size())) workers = static_cast<int>(tasks.size());
  if (workers <= 1) {
    for (auto& t : tasks) t();
    return;
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      try {
        tasks[i]();
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };

  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (int w = 0; w < workers; ++w) threads.emplace_back(worker);
  for (std::thread& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace translab
