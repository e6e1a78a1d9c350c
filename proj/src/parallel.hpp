// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <exception>
#include <vector>

#include "adaptwin/kernels.hpp"

namespace adaptwin::detail {

/// Runs f(i) for i in [0, n) on OpenMP threads (serially when already inside a
/// parallel region or when `parallel` is false). An exception from any iteration
/// is rethrown after the loop; the lowest failing index wins, so the error is the
/// same for every thread count.
template <class F>
void parallel_for(std::size_t n, F&& f, bool parallel = true) {
    std::vector<std::exception_ptr> errors(n);
    const long count = static_cast<long>(n);
    const bool go = parallel && n > 1 && !kernels::in_parallel_region();
#pragma omp parallel for schedule(dynamic, 1) if (go)
    for (long i = 0; i < count; ++i) {
        try {
            f(static_cast<std::size_t>(i));
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}  // namespace adaptwin::detail
