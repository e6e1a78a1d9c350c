// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "adaptwin/errors.hpp"
#include "adaptwin/kernels.hpp"

namespace adaptwin {

namespace {

bool use_parallel(std::size_t work) {
    return work >= kernels::kParallelWorkThreshold && !kernels::in_parallel_region();
}

// Round-robin tournament over n players: n-1 rounds (n even) in which every
// pair meets exactly once and pairs inside a round are disjoint.
std::vector<std::vector<std::size_t>> round_robin(std::size_t n) {
    const std::size_t players = n + (n % 2);
    std::vector<std::size_t> ring(players);
    std::iota(ring.begin(), ring.end(), 0);
    std::vector<std::vector<std::size_t>> rounds;
    for (std::size_t r = 0; r + 1 < players; ++r) {
        std::vector<std::size_t> pairs;
        for (std::size_t i = 0; i < players / 2; ++i) {
            std::size_t a = ring[i];
            std::size_t b = ring[players - 1 - i];
            if (a >= n || b >= n) {
                continue;
            }
            pairs.push_back(std::min(a, b));
            pairs.push_back(std::max(a, b));
        }
        rounds.push_back(std::move(pairs));
        std::rotate(ring.begin() + 1, ring.end() - 1, ring.end());
    }
    return rounds;
}

// Completes column `col` of u with a unit vector orthogonal to columns [0, col).
void complete_basis(Matrix& u, std::size_t col) {
    const std::size_t m = u.rows();
    for (std::size_t e = 0; e < m; ++e) {
        std::vector<double> cand(m, 0.0);
        cand[e] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < col; ++j) {
                double dot = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    dot += u(i, j) * cand[i];
                }
                for (std::size_t i = 0; i < m; ++i) {
                    cand[i] -= dot * u(i, j);
                }
            }
        }
        double norm = 0.0;
        for (double v : cand) {
            norm += v * v;
        }
        norm = std::sqrt(norm);
        if (norm > 0.5) {
            for (std::size_t i = 0; i < m; ++i) {
                u(i, col) = cand[i] / norm;
            }
            return;
        }
    }
    throw NumericalError("svd: could not complete an orthonormal basis");
}

// SVD for rows >= cols. Works on the transpose so each column is a contiguous row.
SvdResult svd_tall(const Matrix& a, const SvdOptions& opt) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    Matrix w = transpose(a);  // n × m
    Matrix vt = Matrix::identity(n);
    const double tol = opt.tol > 0.0 ? opt.tol : static_cast<double>(std::max<std::size_t>(m, 1)) *
                                                     std::numeric_limits<double>::epsilon();
    const auto rounds = round_robin(n);
    const bool parallel = opt.parallel && use_parallel(n * n * m / 2);

    std::size_t sweep = 0;
    for (;; ++sweep) {
        if (sweep == opt.max_sweeps) {
            throw NumericalError("svd: no convergence after " + std::to_string(sweep) + " sweeps on " +
                                 a.shape_string() + " input");
        }
        std::size_t rotations = 0;
        for (const auto& pairs : rounds) {
            rotations += parallel ? kernels::omp::jacobi_round(w, vt, pairs.data(), pairs.size() / 2, tol)
                                  : kernels::serial::jacobi_round(w, vt, pairs.data(), pairs.size() / 2, tol);
        }
        if (rotations == 0) {
            break;
        }
    }

    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (double v : w.row(i)) {
            s += v * v;
        }
        norms[i] = std::sqrt(s);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    SvdResult out;
    out.u = Matrix(m, n);
    out.v = Matrix(n, n);
    out.sigma.resize(n);
    std::vector<std::size_t> zero_cols;
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t src = order[k];
        const double s = norms[src];
        out.sigma[k] = s;
        for (std::size_t j = 0; j < n; ++j) {
            out.v(j, k) = vt(src, j);
        }
        if (s > 0.0) {
            for (std::size_t i = 0; i < m; ++i) {
                out.u(i, k) = w(src, i) / s;
            }
        } else {
            zero_cols.push_back(k);
        }
    }
    for (std::size_t k : zero_cols) {
        complete_basis(out.u, k);
    }
    return out;
}

void fix_signs(SvdResult& s) {
    const std::size_t k = s.sigma.size();
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t best = 0;
        double best_abs = -1.0;
        for (std::size_t i = 0; i < s.u.rows(); ++i) {
            const double v = std::abs(s.u(i, c));
            if (v > best_abs) {
                best_abs = v;
                best = i;
            }
        }
        if (s.u(best, c) < 0.0) {
            for (std::size_t i = 0; i < s.u.rows(); ++i) {
                s.u(i, c) = -s.u(i, c);
            }
            for (std::size_t i = 0; i < s.v.rows(); ++i) {
                s.v(i, c) = -s.v(i, c);
            }
        }
    }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix c;
    if (use_parallel(a.rows() * a.cols() * b.cols())) {
        kernels::omp::gemm_nn(a, b, c);
    } else {
        kernels::serial::gemm_nn(a, b, c);
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    Matrix c;
    if (use_parallel(a.rows() * a.cols() * b.rows())) {
        kernels::omp::gemm_nt(a, b, c);
    } else {
        kernels::serial::gemm_nt(a, b, c);
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    Matrix c;
    if (use_parallel(a.rows() * a.cols() * b.cols())) {
        kernels::omp::gemm_tn(a, b, c);
    } else {
        kernels::serial::gemm_tn(a, b, c);
    }
    return c;
}

double fro_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.values()) {
        s += v * v;
    }
    return std::sqrt(s);
}

SvdResult svd(const Matrix& m, const SvdOptions& options) {
    if (m.empty()) {
        throw ShapeError("svd: empty matrix");
    }
    if (!m.all_finite()) {
        throw NumericalError("svd: non-finite input");
    }
    SvdResult out;
    if (m.rows() >= m.cols()) {
        out = svd_tall(m, options);
    } else {
        SvdResult t = svd_tall(transpose(m), options);
        out.u = std::move(t.v);
        out.v = std::move(t.u);
        out.sigma = std::move(t.sigma);
    }
    fix_signs(out);
    return out;
}

SpectralPair truncate(const SvdResult& s, std::size_t r) {
    const std::size_t k = s.sigma.size();
    if (r < 1 || r > k) {
        throw RankError("truncate: rank " + std::to_string(r) + " outside [1, " + std::to_string(k) + "]");
    }
    const double floor = 1e-12 * (k > 0 ? s.sigma.front() : 0.0);
    std::vector<double> root(r);
    for (std::size_t i = 0; i < r; ++i) {
        root[i] = s.sigma[i] < floor ? 0.0 : std::sqrt(s.sigma[i]);
    }
    SpectralPair out{Matrix(s.u.rows(), r), Matrix(r, s.v.rows())};
    for (std::size_t i = 0; i < s.u.rows(); ++i) {
        for (std::size_t j = 0; j < r; ++j) {
            out.left(i, j) = s.u(i, j) * root[j];
        }
    }
    for (std::size_t j = 0; j < r; ++j) {
        for (std::size_t i = 0; i < s.v.rows(); ++i) {
            out.right(j, i) = root[j] * s.v(i, j);
        }
    }
    return out;
}

Matrix reconstruct(const SvdResult& s) {
    Matrix scaled = s.u;
    for (std::size_t i = 0; i < scaled.rows(); ++i) {
        for (std::size_t j = 0; j < scaled.cols(); ++j) {
            scaled(i, j) *= s.sigma[j];
        }
    }
    return matmul_nt(scaled, s.v);
}

}  // namespace adaptwin
