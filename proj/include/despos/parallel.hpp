#pragma once

#include <cstddef>
#include <functional>

namespace despos {

/// DESPOS_THREADS if set to a positive integer, else the hardware thread count.
int worker_count();

/// Calls fn(i) for i in [0, n) across worker_count() threads. Each index runs
/// exactly once; the first exception thrown is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace despos
