// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

// Internal evaluation form shared by original and compressed layers: every
// projection is a head-stacked dense matrix with a per-head width k (d_h for
// original layers, r_a + l_a for compressed ones) and feed-forward weights are
// materialized.

#pragma once

#include <vector>

#include "adaptwin/model.hpp"

namespace adaptwin::detail {

struct DenseLayer {
    std::size_t heads = 0;
    std::size_t head_width = 0;
    double scale = 1.0;  // 1/√d_h of the source layer, kept after compression
    LayerConfig cfg;
    Matrix w_q, w_k, w_v, w_o_t;  // (heads·head_width) × d
    Matrix b_q, b_v;              // 1 × (heads·head_width), optional
    Matrix qk_bias;               // heads × d, optional
    Matrix b_o;
    Matrix ln_gain, ln_bias, ln2_gain, ln2_bias;
    Matrix w_1, b_1, w_2, b_2;
};

struct ForwardCache {
    Matrix x;
    Matrix kv_src;     // cross_kv, or the same as q_src
    bool self_kv = true;
    Matrix q_src;      // x (post-norm) or LN1(x) (pre-norm)
    Matrix ln1_hat;    // pre-norm only
    std::vector<double> ln1_inv;
    Matrix q, k, v;    // n × Hk, m × Hk
    std::vector<Matrix> probs;
    Matrix context;    // n × Hk
    Matrix ln_hat;     // normalized residual feeding the feed-forward block
    std::vector<double> ln_inv;
    Matrix normed;
    Matrix pre_act, act;
};

DenseLayer densify(const LayerParams& p, const ModelDims& dims, const LayerConfig& cfg);
DenseLayer densify(const CompressedLayerParams& p, const ModelDims& dims, const LayerConfig& cfg);

Matrix dense_forward(const DenseLayer& L, const Matrix& x, const ForwardOptions& opts, ForwardCache* cache,
                     AttentionTrace* trace);

struct DenseGradients {
    DenseLayer grads;  // only tensor members are meaningful
    Matrix input;
    Matrix cross_kv;
};

DenseGradients dense_backward(const DenseLayer& L, const ForwardCache& cache, const Matrix& upstream);

/// acc += g over every tensor member; both come from the same layer.
void add_into(DenseLayer& acc, const DenseLayer& g);

/// Maps dense-form gradients back onto the parameterization of `like`.
LayerParams pull_back(const DenseLayer& g, const LayerParams& like);
CompressedLayerParams pull_back(const DenseLayer& g, const CompressedLayerParams& like);

}  // namespace adaptwin::detail
