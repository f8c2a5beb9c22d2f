#pragma once

#include <cstddef>
#include <functional>

namespace gka {

/// Caps the worker count used by parallel_for. 0 selects hardware concurrency.
void set_max_threads(std::size_t n);
std::size_t max_threads();

/// Runs fn(i) for i in [0, count). Work items must write disjoint outputs;
/// the split never reorders the reduction inside a single item.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace gka
