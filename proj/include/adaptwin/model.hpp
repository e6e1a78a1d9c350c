// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "adaptwin/matrix.hpp"

namespace adaptwin {

struct ModelDims {
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t head_dim = 16;
    std::size_t d_ff = 256;
    std::size_t n_layers = 4;
    std::size_t vocab = 32;

    /// Throws ConfigError unless every field but n_layers is positive and heads·head_dim == d_model.
    void validate() const;
    bool operator==(const ModelDims&) const = default;
};

enum class Activation { Gelu, Relu };

std::string to_string(Activation a);
Activation parse_activation(const std::string& s);

struct LayerConfig {
    Activation activation = Activation::Gelu;
    /// false: attention residual + post-norm, bare feed-forward (the reference layer).
    /// true: pre-norm attention and feed-forward blocks, each with a residual.
    bool ff_residual_pre_ln = false;
    double ln_eps = 1e-5;

    bool operator==(const LayerConfig&) const = default;
};

/// Uncompressed layer weights. Projections are head-stacked: head h owns rows
/// [h·d_h, (h+1)·d_h) of w_q, w_k, w_v and the same columns of w_o.
/// Optional biases are 1×n, or empty when absent.
struct LayerParams {
    Matrix w_q, w_k, w_v, w_o;  // d × d
    Matrix w_1;                 // d_ff × d
    Matrix w_2;                 // d × d_ff
    Matrix b_q, b_v, b_o, b_1, b_2;
    Matrix ln_gain, ln_bias;    // norm after attention (post-norm) or before it (pre-norm)
    Matrix ln2_gain, ln2_bias;  // pre-norm variant only: norm before the feed-forward block

    void validate(const ModelDims& dims, const LayerConfig& cfg) const;
    bool operator==(const LayerParams&) const = default;
};

/// Spectral and LoRA ranks for one layer.
struct RankPlan {
    std::size_t attn_rank = 0;  // r_a
    std::size_t attn_lora = 0;  // l_a
    std::size_t ff_rank = 0;    // r_f
    std::size_t ff_lora = 0;    // l_f

    std::size_t attn_width() const noexcept { return attn_rank + attn_lora; }
    std::size_t ff_width() const noexcept { return ff_rank + ff_lora; }

    /// Bounds against the dims plus r ≥ l and r_a, r_f ≥ 1. Throws PlanError.
    void validate(const ModelDims& dims) const;
    /// Bounds only (widths within head_dim / min(d, d_ff), non-zero widths).
    void validate_bounds(const ModelDims& dims) const;
    bool operator==(const RankPlan&) const = default;
};

/// Effective weight u·v + a·b, with (u, v) the spectral factors and (a, b) the LoRA pair.
struct FactoredWeight {
    Matrix u, v, a, b;

    Matrix effective() const;
    std::size_t out_dim() const noexcept { return u.rows() ? u.rows() : a.rows(); }
    std::size_t in_dim() const noexcept { return v.cols() ? v.cols() : b.cols(); }
    bool operator==(const FactoredWeight&) const = default;
};

/// Compressed layer. Attention stacks hold H blocks of (r_a + l_a) rows; inside a block
/// the first r_a rows are spectral and the trailing l_a rows are LoRA.
///
/// w_o_t stores the transposed output projection. Query and value biases of the source
/// layer are folded away: the query bias becomes the per-head key-side logit term
/// qk_bias (H × d) and the value bias is absorbed into b_o.
struct CompressedLayerParams {
    RankPlan ranks;
    Matrix w_q, w_k, w_v, w_o_t;
    Matrix qk_bias;
    FactoredWeight ff_1;  // d_ff × d
    FactoredWeight ff_2;  // d × d_ff
    Matrix b_o, b_1, b_2;
    Matrix ln_gain, ln_bias, ln2_gain, ln2_bias;
    /// Factor matrices hold int8-representable values (per-row scales).
    bool quantized = false;

    std::size_t head_width() const noexcept { return ranks.attn_width(); }
    void validate(const ModelDims& dims, const LayerConfig& cfg) const;
    bool operator==(const CompressedLayerParams&) const = default;
};

enum class TensorClass { Dense, Spectral, Lora, Bias, Norm };

std::string to_string(TensorClass c);

/// Mutable handle on one named parameter tensor. For head-stacked attention
/// factors the class varies by row: rows (row mod block) < spectral_rows are
/// spectral, the rest LoRA.
struct ParamRef {
    std::string name;
    Matrix* tensor = nullptr;
    TensorClass cls = TensorClass::Dense;
    std::size_t block = 0;
    std::size_t spectral_rows = 0;

    TensorClass row_class(std::size_t row) const noexcept {
        if (block == 0) {
            return cls;
        }
        return (row % block) < spectral_rows ? TensorClass::Spectral : TensorClass::Lora;
    }
    bool is_factor() const noexcept { return block != 0 || cls == TensorClass::Spectral || cls == TensorClass::Lora; }
};

/// Non-empty tensors in a fixed order; two objects of the same shape yield aligned lists.
std::vector<ParamRef> parameters(LayerParams& p);
std::vector<ParamRef> parameters(CompressedLayerParams& p);

struct ForwardOptions {
    bool causal = false;
    /// Keys and values come from this sequence instead of the layer input.
    const Matrix* cross_kv = nullptr;
    /// Reported in numerical errors; negative when unknown.
    int layer_index = -1;
};

/// Per-head intermediates of the attention block.
struct AttentionTrace {
    std::vector<Matrix> queries, keys, values, probs, context;
    Matrix output;      // Z, attention output after the output projection
    Matrix normalized;  // Z′, the norm output feeding the feed-forward block
};

Matrix layer_forward(const LayerParams& p, const ModelDims& dims, const LayerConfig& cfg, const Matrix& x,
                     const ForwardOptions& opts = {}, AttentionTrace* trace = nullptr);
Matrix layer_forward(const CompressedLayerParams& p, const ModelDims& dims, const LayerConfig& cfg,
                     const Matrix& x, const ForwardOptions& opts = {}, AttentionTrace* trace = nullptr);

template <class Params>
struct LayerGradients {
    Params params;  // same shapes as the layer parameters
    Matrix input;
    Matrix cross_kv;  // empty unless ForwardOptions::cross_kv was set
};

LayerGradients<LayerParams> layer_backward(const LayerParams& p, const ModelDims& dims, const LayerConfig& cfg,
                                           const Matrix& x, const Matrix& upstream,
                                           const ForwardOptions& opts = {});
LayerGradients<CompressedLayerParams> layer_backward(const CompressedLayerParams& p, const ModelDims& dims,
                                                     const LayerConfig& cfg, const Matrix& x,
                                                     const Matrix& upstream, const ForwardOptions& opts = {});

/// Zero tensors shaped like `p`.
LayerParams zeros_like(const LayerParams& p);
CompressedLayerParams zeros_like(const CompressedLayerParams& p);

using TokenSeq = std::vector<int>;

/// Toy transformer: token embedding + fixed sinusoidal positions, a layer stack
/// and a linear readout to vocabulary logits.
struct Model {
    ModelDims dims;
    LayerConfig config;
    bool causal = false;
    Matrix token_embedding;  // vocab × d
    Matrix readout;          // vocab × d
    Matrix readout_bias;     // 1 × vocab
    std::vector<LayerParams> layers;

    void validate() const;
    bool operator==(const Model&) const = default;
};

Matrix positional_encoding(std::size_t length, std::size_t d_model);
/// Throws InputError on an out-of-range token.
Matrix embed(const Model& m, std::span<const int> tokens);
Matrix readout_logits(const Model& m, const Matrix& hidden);
Matrix model_forward(const Model& m, std::span<const int> tokens);

struct ModelGradients {
    Matrix token_embedding, readout, readout_bias;
    std::vector<LayerParams> layers;
};

/// Gradients of Σ upstream ⊙ logits with respect to every model parameter.
ModelGradients model_backward(const Model& m, std::span<const int> tokens, const Matrix& upstream);

/// One (X_i, X_o) sample: a layer's input and the original layer's output.
struct HiddenStatePair {
    Matrix input;
    Matrix output;
    bool operator==(const HiddenStatePair&) const = default;
};

struct HiddenStatePairSet {
    std::size_t layer_index = 0;
    ModelDims dims;
    std::vector<HiddenStatePair> pairs;
    std::string source_hash;
    std::string distribution;
    /// Attention masking the pairs were captured with.
    bool causal = false;

    /// Throws InputError when empty or when a pair's width differs from dims.d_model.
    void validate() const;
};

/// Runs the original model on every input and records the given layer's input/output.
/// Throws InputError when layer_index is out of range.
HiddenStatePairSet capture_hidden_states(const Model& m, std::span<const TokenSeq> inputs,
                                         std::size_t layer_index);
/// Pairs for every layer from a single pass per input.
std::vector<HiddenStatePairSet> capture_all_hidden_states(const Model& m, std::span<const TokenSeq> inputs);

}  // namespace adaptwin
