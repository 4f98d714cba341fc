#pragma once

#include <cstddef>
#include <functional>

namespace refgeo {

// Process-wide worker count for prompt-parallel loops. Results are
// deterministic regardless of the setting: workers fill preassigned slots
// and reductions happen in index order.
void set_threads(int n);
int get_threads();

// Calls fn(i) for i in [0, n), split across get_threads() workers.
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

}  // namespace refgeo
