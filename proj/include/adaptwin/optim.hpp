// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "adaptwin/matrix.hpp"
#include "adaptwin/model.hpp"

namespace adaptwin {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Per-tensor, per-row trainability flags aligned with a parameters() list.
using RowMask = std::vector<std::vector<std::uint8_t>>;

/// Adam over a fixed list of tensors. Rows whose mask is 0 are never written,
/// so frozen parameters stay bit-identical.
class Adam {
public:
    Adam(AdamConfig cfg, const std::vector<ParamRef>& params, RowMask mask);

    /// params and grads must be aligned parameters() lists of the same shapes.
    void step(const std::vector<ParamRef>& params, const std::vector<ParamRef>& grads);
    std::size_t steps() const noexcept { return t_; }

private:
    AdamConfig cfg_;
    RowMask mask_;
    std::vector<Matrix> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace adaptwin
