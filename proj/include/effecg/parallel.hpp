#pragma once

#include <cstddef>
#include <functional>

namespace effecg {

/// Worker count: hardware concurrency capped by EFFECG_THREADS when set.
std::size_t worker_count();

/// Run body(i) for i in [0, n). Iterations must be independent; any
/// reduction over them has to be done by the caller in index order.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace effecg
