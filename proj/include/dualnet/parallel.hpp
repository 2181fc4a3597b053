#pragma once

#include <cstddef>
#include <functional>

namespace dualnet {

/// Number of hardware threads, at least 1.
std::size_t default_threads();

/// Runs body(i) for i in [0, n) on up to `threads` workers, each taking a
/// contiguous block.  The first exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body);

}  // namespace dualnet
