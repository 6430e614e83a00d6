#pragma once

#include <cstddef>
#include <functional>

namespace flowibr {

/// Worker count: FLOWIBR_THREADS if set to a positive integer, else the
/// hardware concurrency (at least 1).
[[nodiscard]] int worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Tasks must not
/// share mutable state; exceptions are rethrown on the calling thread (the one
/// from the lowest index wins).
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace flowibr
