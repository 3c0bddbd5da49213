#pragma once

#include <cstddef>
#include <functional>

namespace ssr {

/// Worker cap: min(hardware concurrency, SSR_THREADS env var if set).
std::size_t worker_count();

/// Runs fn(i) for i in [begin, end) across workers. Each index writes only
/// its own output slot, so results are deterministic regardless of schedule.
void parallel_for(std::size_t begin, std::size_t end, const std::function<void(std::size_t)>& fn);

}  // namespace ssr
