// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include <omp.h>

#include "adaptwin/errors.hpp"

namespace adaptwin::kernels {

namespace {

void check_nn(const Matrix& a, const Matrix& b, Matrix& c) {
    if (a.cols() != b.rows()) {
        throw ShapeError("gemm_nn: " + a.shape_string() + " times " + b.shape_string());
    }
    if (c.rows() != a.rows() || c.cols() != b.cols()) {
        c = Matrix(a.rows(), b.cols());
    }
}

void check_nt(const Matrix& a, const Matrix& b, Matrix& c) {
    if (a.cols() != b.cols()) {
        throw ShapeError("gemm_nt: " + a.shape_string() + " times transpose of " + b.shape_string());
    }
    if (c.rows() != a.rows() || c.cols() != b.rows()) {
        c = Matrix(a.rows(), b.rows());
    }
}

void check_tn(const Matrix& a, const Matrix& b, Matrix& c) {
    if (a.rows() != b.rows()) {
        throw ShapeError("gemm_tn: transpose of " + a.shape_string() + " times " + b.shape_string());
    }
    if (c.rows() != a.cols() || c.cols() != b.cols()) {
        c = Matrix(a.cols(), b.cols());
    }
}

inline void nn_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    const std::size_t n = b.cols();
    double* out = c.row(i).data();
    std::fill(out, out + n, 0.0);
    const double* ai = a.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
        const double s = ai[k];
        const double* bk = b.row(k).data();
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += s * bk[j];
        }
    }
}

inline void nt_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    const double* ai = a.row(i).data();
    const std::size_t inner = a.cols();
    for (std::size_t j = 0; j < b.rows(); ++j) {
        const double* bj = b.row(j).data();
        double acc = 0.0;
        for (std::size_t k = 0; k < inner; ++k) {
            acc += ai[k] * bj[k];
        }
        c(i, j) = acc;
    }
}

inline void tn_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    const std::size_t n = b.cols();
    double* out = c.row(i).data();
    std::fill(out, out + n, 0.0);
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double s = a(k, i);
        const double* bk = b.row(k).data();
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += s * bk[j];
        }
    }
}

inline void softmax_row(std::span<double> r) {
    if (r.empty()) {
        return;
    }
    const double mx = *std::max_element(r.begin(), r.end());
    if (mx == -INFINITY) {
        // Fully masked row; uniform is the only sensible distribution.
        std::fill(r.begin(), r.end(), 1.0 / static_cast<double>(r.size()));
        return;
    }
    double sum = 0.0;
    for (auto& v : r) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (auto& v : r) {
        v /= sum;
    }
}

// Hestenes one-sided rotation of rows p, q so that they become orthogonal.
inline std::size_t rotate_pair(Matrix& w, Matrix& vt, std::size_t p, std::size_t q, double tol) {
    double* wp = w.row(p).data();
    double* wq = w.row(q).data();
    const std::size_t m = w.cols();
    double alpha = 0.0;
    double beta = 0.0;
    double gamma = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
        alpha += wp[k] * wp[k];
        beta += wq[k] * wq[k];
        gamma += wp[k] * wq[k];
    }
    if (alpha == 0.0 || beta == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha) * std::sqrt(beta)) {
        return 0;
    }
    const double zeta = (beta - alpha) / (2.0 * gamma);
    const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
    const double c = 1.0 / std::sqrt(1.0 + t * t);
    const double s = c * t;
    for (std::size_t k = 0; k < m; ++k) {
        const double x = wp[k];
        const double y = wq[k];
        wp[k] = c * x - s * y;
        wq[k] = s * x + c * y;
    }
    double* vp = vt.row(p).data();
    double* vq = vt.row(q).data();
    for (std::size_t k = 0; k < vt.cols(); ++k) {
        const double x = vp[k];
        const double y = vq[k];
        vp[k] = c * x - s * y;
        vq[k] = s * x + c * y;
    }
    return 1;
}

}  // namespace

bool in_parallel_region() noexcept { return omp_in_parallel() != 0; }

namespace serial {

void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c) {
    check_nn(a, b, c);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        nn_row(a, b, c, i);
    }
}

void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c) {
    check_nt(a, b, c);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        nt_row(a, b, c, i);
    }
}

void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c) {
    check_tn(a, b, c);
    for (std::size_t i = 0; i < a.cols(); ++i) {
        tn_row(a, b, c, i);
    }
}

void softmax_rows(Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        softmax_row(m.row(i));
    }
}

std::size_t jacobi_round(Matrix& w, Matrix& vt, const std::size_t* pairs, std::size_t n_pairs, double tol) {
    std::size_t rotations = 0;
    for (std::size_t k = 0; k < n_pairs; ++k) {
        rotations += rotate_pair(w, vt, pairs[2 * k], pairs[2 * k + 1], tol);
    }
    return rotations;
}

}  // namespace serial

namespace omp {

void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c) {
    check_nn(a, b, c);
    const auto rows = static_cast<std::int64_t>(a.rows());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < rows; ++i) {
        nn_row(a, b, c, static_cast<std::size_t>(i));
    }
}

void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c) {
    check_nt(a, b, c);
    const auto rows = static_cast<std::int64_t>(a.rows());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < rows; ++i) {
        nt_row(a, b, c, static_cast<std::size_t>(i));
    }
}

void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c) {
    check_tn(a, b, c);
    const auto rows = static_cast<std::int64_t>(a.cols());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < rows; ++i) {
        tn_row(a, b, c, static_cast<std::size_t>(i));
    }
}

void softmax_rows(Matrix& m) {
    const auto rows = static_cast<std::int64_t>(m.rows());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < rows; ++i) {
        softmax_row(m.row(static_cast<std::size_t>(i)));
    }
}

std::size_t jacobi_round(Matrix& w, Matrix& vt, const std::size_t* pairs, std::size_t n_pairs, double tol) {
    std::size_t rotations = 0;
    const auto n = static_cast<std::int64_t>(n_pairs);
#pragma omp parallel for schedule(static) reduction(+ : rotations)
    for (std::int64_t k = 0; k < n; ++k) {
        rotations += rotate_pair(w, vt, pairs[2 * k], pairs[2 * k + 1], tol);
    }
    return rotations;
}

}  // namespace omp

}  // namespace adaptwin::kernels
