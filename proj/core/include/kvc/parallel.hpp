#pragma once

#include <cstddef>
#include <functional>

namespace kvc {

/// Worker count: KVC_THREADS when set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t thread_budget();

/// Runs fn(i) for i in [0, n) on up to thread_budget() threads. Exceptions
/// from workers are rethrown on the caller (first one wins).
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

} // namespace kvc
