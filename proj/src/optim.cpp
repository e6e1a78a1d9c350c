// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/optim.hpp"

#include <cmath>

#include "adaptwin/errors.hpp"

namespace adaptwin {

Adam::Adam(AdamConfig cfg, const std::vector<ParamRef>& params, RowMask mask) : cfg_(cfg), mask_(std::move(mask)) {
    if (mask_.size() != params.size()) {
        throw ShapeError("optimizer mask covers " + std::to_string(mask_.size()) + " tensors, expected " +
                         std::to_string(params.size()));
    }
    for (std::size_t t = 0; t < params.size(); ++t) {
        const Matrix& p = *params[t].tensor;
        if (mask_[t].size() != p.rows()) {
            throw ShapeError("optimizer mask for " + params[t].name + " has wrong row count");
        }
        m_.emplace_back(p.rows(), p.cols());
        v_.emplace_back(p.rows(), p.cols());
    }
}

void Adam::step(const std::vector<ParamRef>& params, const std::vector<ParamRef>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
        throw ShapeError("optimizer step with mismatched tensor lists");
    }
    ++t_;
    const double t = static_cast<double>(t_);
    const double c1 = 1.0 - std::pow(cfg_.beta1, t);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        Matrix& p = *params[k].tensor;
        const Matrix& g = *grads[k].tensor;
        if (!p.same_shape(g) || !p.same_shape(m_[k])) {
            throw ShapeError("gradient for " + params[k].name + " is " + g.shape_string() + ", parameter is " +
                             p.shape_string());
        }
        const std::size_t cols = p.cols();
        for (std::size_t r = 0; r < p.rows(); ++r) {
            if (!mask_[k][r]) {
                continue;
            }
            for (std::size_t c = 0; c < cols; ++c) {
                const double gi = g(r, c);
                double& m = m_[k](r, c);
                double& v = v_[k](r, c);
                m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * gi;
                v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gi * gi;
                p(r, c) -= cfg_.lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
            }
        }
    }
}

}  // namespace adaptwin
