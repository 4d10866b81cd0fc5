#pragma once

#include <cstddef>
#include <functional>

namespace cbav {

// Worker count: CBAV_THREADS if set (>= 1), otherwise the hardware
// concurrency. set_thread_count overrides both; 0 restores the default.
int thread_count();
void set_thread_count(int n);

// Runs body(begin, end) over contiguous chunks of [0, n). Chunk boundaries
// depend only on n and the grain, so per-index outputs are deterministic
// regardless of the worker count. Exceptions from workers are rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t grain = 64);

}  // namespace cbav
