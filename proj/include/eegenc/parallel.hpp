// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace eegenc {

// Worker cap: DSTS_THREADS when set to a positive integer, else hardware concurrency.
std::size_t worker_threads();

// Calls fn(i) for i in [0, n). Work items must write disjoint outputs; results
// never depend on the number of workers.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace eegenc
