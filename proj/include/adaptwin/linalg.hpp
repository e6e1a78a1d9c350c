// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "adaptwin/matrix.hpp"

namespace adaptwin {

/// a · b. Throws ShapeError when a.cols() != b.rows().
Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// aᵀ · b
Matrix matmul_tn(const Matrix& a, const Matrix& b);

/// Square root of the sum of squared entries.
double fro_norm(const Matrix& m);

/// Thin SVD m = u · diag(sigma) · vᵀ with k = min(rows, cols).
///
/// sigma is non-negative and sorted descending; u (m×k) and v (n×k) have
/// orthonormal columns. The sign of each singular pair is fixed so that the
/// largest-magnitude entry of every u column is positive.
struct SvdResult {
    Matrix u;
    std::vector<double> sigma;
    Matrix v;
};

struct SvdOptions {
    std::size_t max_sweeps = 100;
    /// Pairwise orthogonality target |aᵢ·aⱼ| ≤ tol·‖aᵢ‖‖aⱼ‖; ≤ 0 picks rows·ε.
    double tol = 0.0;
    /// Use the OpenMP rotation kernel (results are identical either way).
    bool parallel = true;
};

/// One-sided Jacobi SVD with round-robin pair ordering.
/// Throws NumericalError when the sweep cap is reached, ShapeError on empty input
/// and NumericalError on non-finite input.
SvdResult svd(const Matrix& m, const SvdOptions& options = {});

/// The rank-r spectral pair (U_r Σ_r^{1/2}, Σ_r^{1/2} V_rᵀ).
struct SpectralPair {
    Matrix left;   // m × r
    Matrix right;  // r × n
};

/// Frobenius-optimal rank-r factorization of the matrix behind `s`.
/// Singular values below 1e-12·σ_max are treated as zero.
/// Throws RankError unless 1 ≤ r ≤ sigma.size().
SpectralPair truncate(const SvdResult& s, std::size_t r);

/// u · diag(sigma) · vᵀ over all k components.
Matrix reconstruct(const SvdResult& s);

}  // namespace adaptwin
