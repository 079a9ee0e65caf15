#pragma once

#include <cstddef>
#include <functional>

namespace lab {

// Worker count: hardware concurrency, capped by the LAB_THREADS environment
// variable when it is set to a positive integer.
std::size_t worker_count();

// Runs body(i) for i in [0, n) over contiguous index blocks. Each index must
// write only to its own outputs; results are then independent of the number
// of workers. The first exception raised by any worker is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace lab
