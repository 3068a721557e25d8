#pragma once

#include <cstddef>
#include <functional>

namespace setgen {

/// Worker count used by per-subject loops. Defaults to 1, or to
/// SETGEN_THREADS when set; set_thread_count overrides both.
std::size_t thread_count();
void set_thread_count(std::size_t n);

/// Runs body(i) for i in [0, n). Iterations must write disjoint outputs;
/// results are independent of the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace setgen
