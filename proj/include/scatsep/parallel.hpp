#pragma once

#include <cstddef>
#include <functional>

namespace scatsep {

/// Worker count: SCATSEP_WORKERS if set and positive, else the hardware
/// concurrency (at least 1).
std::size_t default_workers();

/// Run fn(index, worker) for index in [0, n) on up to `workers` threads.
/// Indices are handed out in increasing order; the exception of the lowest
/// failing index is rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace scatsep
