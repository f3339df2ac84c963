#pragma once

#include <functional>
#include <vector>

namespace translab {

// Runs the tasks on a bounded worker pool and blocks until all finish.
// workers <= 1 runs inline. The first exception (if any) is rethrown after
// all workers join.
void run_parallel(int workers, std::vector<std::function<void()>> tasks);

int default_worker_count();

}  // namespace translab
