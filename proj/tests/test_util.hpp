// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "adaptwin/linalg.hpp"
#include "adaptwin/matrix.hpp"
#include "adaptwin/model.hpp"

namespace testutil {

using adaptwin::Matrix;

inline Matrix gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double std = 1.0) {
    std::normal_distribution<double> nd(0.0, std);
    Matrix m(rows, cols);
    for (auto& v : m.values()) {
        v = nd(rng);
    }
    return m;
}

inline Matrix uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> ud(lo, hi);
    Matrix m(rows, cols);
    for (auto& v : m.values()) {
        v = ud(rng);
    }
    return m;
}

inline double rel_err(const Matrix& a, const Matrix& b) {
    const double denom = adaptwin::fro_norm(b);
    return adaptwin::fro_norm(a - b) / (denom > 0 ? denom : 1.0);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    }
    return m;
}

/// Random layer with all biases present; weight scale 1/√fan_in.
inline adaptwin::LayerParams random_layer(const adaptwin::ModelDims& dims, const adaptwin::LayerConfig& cfg,
                                          std::mt19937_64& rng, bool biases = true) {
    const std::size_t d = dims.d_model;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    const double sf = 1.0 / std::sqrt(static_cast<double>(dims.d_ff));
    adaptwin::LayerParams p;
    p.w_q = gaussian(d, d, rng, s);
    p.w_k = gaussian(d, d, rng, s);
    p.w_v = gaussian(d, d, rng, s);
    p.w_o = gaussian(d, d, rng, s);
    p.w_1 = gaussian(dims.d_ff, d, rng, s);
    p.w_2 = gaussian(d, dims.d_ff, rng, sf);
    if (biases) {
        p.b_q = gaussian(1, d, rng, 0.1);
        p.b_v = gaussian(1, d, rng, 0.1);
        p.b_o = gaussian(1, d, rng, 0.1);
        p.b_1 = gaussian(1, dims.d_ff, rng, 0.1);
        p.b_2 = gaussian(1, d, rng, 0.1);
    }
    p.ln_gain = Matrix(1, d, 1.0) + gaussian(1, d, rng, 0.1);
    p.ln_bias = gaussian(1, d, rng, 0.1);
    if (cfg.ff_residual_pre_ln) {
        p.ln2_gain = Matrix(1, d, 1.0) + gaussian(1, d, rng, 0.1);
        p.ln2_bias = gaussian(1, d, rng, 0.1);
    }
    return p;
}

}  // namespace testutil
