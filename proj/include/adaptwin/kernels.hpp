// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>

#include "adaptwin/matrix.hpp"

// Hot loops come in two flavours with identical arithmetic: `serial` is the
// reference kept for tests, `omp` splits the outermost independent loop across
// OpenMP threads. Every output element is accumulated in the same order in both,
// so results are bit-identical regardless of thread count.
namespace adaptwin::kernels {

namespace serial {

/// c = a · b
void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c);
/// c = a · bᵀ
void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c);
/// c = aᵀ · b
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c);
/// Row-wise numerically stable softmax, in place.
void softmax_rows(Matrix& m);
/// One round of Jacobi rotations on disjoint row pairs of `w` (and `vt`).
/// Returns the number of rotations applied.
std::size_t jacobi_round(Matrix& w, Matrix& vt, const std::size_t* pairs, std::size_t n_pairs, double tol);

}  // namespace serial

namespace omp {

void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c);
void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c);
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c);
void softmax_rows(Matrix& m);
std::size_t jacobi_round(Matrix& w, Matrix& vt, const std::size_t* pairs, std::size_t n_pairs, double tol);

}  // namespace omp

/// Work (multiply-adds) above which the dispatching wrappers use the OpenMP path.
inline constexpr std::size_t kParallelWorkThreshold = std::size_t{1} << 16;

/// True when called from inside an active OpenMP parallel region.
bool in_parallel_region() noexcept;

}  // namespace adaptwin::kernels
