// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "adaptwin/errors.hpp"
#include "adaptwin/linalg.hpp"
#include "dense_layer.hpp"

namespace adaptwin {

namespace {

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* what) {
    if (m.rows() != rows || m.cols() != cols) {
        throw ShapeError(std::string(what) + " is " + m.shape_string() + ", expected " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    }
}

void expect_optional(const Matrix& m, std::size_t cols, const char* what) {
    if (!m.empty() || m.rows() != 0) {
        expect_shape(m, 1, cols, what);
    }
}

void push(std::vector<ParamRef>& out, const char* name, Matrix& m, TensorClass cls) {
    if (!m.empty()) {
        out.push_back(ParamRef{name, &m, cls, 0, 0});
    }
}

}  // namespace

void ModelDims::validate() const {
    if (d_model == 0 || heads == 0 || head_dim == 0 || d_ff == 0 || vocab == 0) {
        throw ConfigError("model dims must be positive (n_layers may be 0)");
    }
    if (heads * head_dim != d_model) {
        throw ConfigError("heads * head_dim (" + std::to_string(heads * head_dim) + ") != d_model (" +
                          std::to_string(d_model) + ")");
    }
}

std::string to_string(Activation a) { return a == Activation::Gelu ? "gelu" : "relu"; }

Activation parse_activation(const std::string& s) {
    if (s == "gelu") {
        return Activation::Gelu;
    }
    if (s == "relu") {
        return Activation::Relu;
    }
    throw ConfigError("unknown activation '" + s + "'");
}

std::string to_string(TensorClass c) {
    switch (c) {
        case TensorClass::Dense: return "dense";
        case TensorClass::Spectral: return "spectral";
        case TensorClass::Lora: return "lora";
        case TensorClass::Bias: return "bias";
        case TensorClass::Norm: return "norm";
    }
    return "unknown";
}

void LayerParams::validate(const ModelDims& dims, const LayerConfig& cfg) const {
    const std::size_t d = dims.d_model;
    expect_shape(w_q, d, d, "w_q");
    expect_shape(w_k, d, d, "w_k");
    expect_shape(w_v, d, d, "w_v");
    expect_shape(w_o, d, d, "w_o");
    expect_shape(w_1, dims.d_ff, d, "w_1");
    expect_shape(w_2, d, dims.d_ff, "w_2");
    expect_optional(b_q, d, "b_q");
    expect_optional(b_v, d, "b_v");
    expect_optional(b_o, d, "b_o");
    expect_optional(b_1, dims.d_ff, "b_1");
    expect_optional(b_2, d, "b_2");
    expect_shape(ln_gain, 1, d, "ln_gain");
    expect_shape(ln_bias, 1, d, "ln_bias");
    if (cfg.ff_residual_pre_ln) {
        expect_shape(ln2_gain, 1, d, "ln2_gain");
        expect_shape(ln2_bias, 1, d, "ln2_bias");
    }
}

void RankPlan::validate_bounds(const ModelDims& dims) const {
    if (attn_width() == 0 || ff_width() == 0) {
        throw PlanError("rank plan widths must be positive");
    }
    if (attn_width() > dims.head_dim) {
        throw PlanError("r_a + l_a = " + std::to_string(attn_width()) + " exceeds head_dim " +
                        std::to_string(dims.head_dim));
    }
    const std::size_t ff_cap = std::min(dims.d_model, dims.d_ff);
    if (ff_width() > ff_cap) {
        throw PlanError("r_f + l_f = " + std::to_string(ff_width()) + " exceeds min(d, d_ff) = " +
                        std::to_string(ff_cap));
    }
}

void RankPlan::validate(const ModelDims& dims) const {
    validate_bounds(dims);
    if (attn_rank < 1 || ff_rank < 1) {
        throw PlanError("spectral ranks must be at least 1");
    }
    if (attn_rank < attn_lora || ff_rank < ff_lora) {
        throw PlanError("LoRA rank may not exceed the spectral rank (r_a >= l_a, r_f >= l_f)");
    }
}

Matrix FactoredWeight::effective() const {
    Matrix w = matmul(u, v);
    if (w.empty() && w.rows() == 0) {
        w = Matrix(out_dim(), in_dim());
    }
    if (a.cols() > 0) {
        w += matmul(a, b);
    }
    return w;
}

void CompressedLayerParams::validate(const ModelDims& dims, const LayerConfig& cfg) const {
    ranks.validate_bounds(dims);
    const std::size_t d = dims.d_model;
    const std::size_t rows = dims.heads * head_width();
    expect_shape(w_q, rows, d, "w_q'");
    expect_shape(w_k, rows, d, "w_k'");
    expect_shape(w_v, rows, d, "w_v'");
    expect_shape(w_o_t, rows, d, "w_o_t'");
    if (!qk_bias.empty()) {
        expect_shape(qk_bias, dims.heads, d, "qk_bias");
    }
    expect_shape(ff_1.u, dims.d_ff, ranks.ff_rank, "ff_1.u");
    expect_shape(ff_1.v, ranks.ff_rank, d, "ff_1.v");
    expect_shape(ff_1.a, dims.d_ff, ranks.ff_lora, "ff_1.a");
    expect_shape(ff_1.b, ranks.ff_lora, d, "ff_1.b");
    expect_shape(ff_2.u, d, ranks.ff_rank, "ff_2.u");
    expect_shape(ff_2.v, ranks.ff_rank, dims.d_ff, "ff_2.v");
    expect_shape(ff_2.a, d, ranks.ff_lora, "ff_2.a");
    expect_shape(ff_2.b, ranks.ff_lora, dims.d_ff, "ff_2.b");
    expect_optional(b_o, d, "b_o");
    expect_optional(b_1, dims.d_ff, "b_1");
    expect_optional(b_2, d, "b_2");
    expect_shape(ln_gain, 1, d, "ln_gain");
    expect_shape(ln_bias, 1, d, "ln_bias");
    if (cfg.ff_residual_pre_ln) {
        expect_shape(ln2_gain, 1, d, "ln2_gain");
        expect_shape(ln2_bias, 1, d, "ln2_bias");
    }
}

std::vector<ParamRef> parameters(LayerParams& p) {
    std::vector<ParamRef> out;
    push(out, "w_q", p.w_q, TensorClass::Dense);
    push(out, "w_k", p.w_k, TensorClass::Dense);
    push(out, "w_v", p.w_v, TensorClass::Dense);
    push(out, "w_o", p.w_o, TensorClass::Dense);
    push(out, "w_1", p.w_1, TensorClass::Dense);
    push(out, "w_2", p.w_2, TensorClass::Dense);
    push(out, "b_q", p.b_q, TensorClass::Bias);
    push(out, "b_v", p.b_v, TensorClass::Bias);
    push(out, "b_o", p.b_o, TensorClass::Bias);
    push(out, "b_1", p.b_1, TensorClass::Bias);
    push(out, "b_2", p.b_2, TensorClass::Bias);
    push(out, "ln_gain", p.ln_gain, TensorClass::Norm);
    push(out, "ln_bias", p.ln_bias, TensorClass::Norm);
    push(out, "ln2_gain", p.ln2_gain, TensorClass::Norm);
    push(out, "ln2_bias", p.ln2_bias, TensorClass::Norm);
    return out;
}

std::vector<ParamRef> parameters(CompressedLayerParams& p) {
    std::vector<ParamRef> out;
    const std::size_t block = p.head_width();
    const std::size_t spectral = p.ranks.attn_rank;
    for (auto [name, m] : {std::pair<const char*, Matrix*>{"w_q", &p.w_q},
                           {"w_k", &p.w_k},
                           {"w_v", &p.w_v},
                           {"w_o_t", &p.w_o_t}}) {
        if (!m->empty()) {
            out.push_back(ParamRef{name, m, TensorClass::Spectral, block, spectral});
        }
    }
    push(out, "ff_1.u", p.ff_1.u, TensorClass::Spectral);
    push(out, "ff_1.v", p.ff_1.v, TensorClass::Spectral);
    push(out, "ff_1.a", p.ff_1.a, TensorClass::Lora);
    push(out, "ff_1.b", p.ff_1.b, TensorClass::Lora);
    push(out, "ff_2.u", p.ff_2.u, TensorClass::Spectral);
    push(out, "ff_2.v", p.ff_2.v, TensorClass::Spectral);
    push(out, "ff_2.a", p.ff_2.a, TensorClass::Lora);
    push(out, "ff_2.b", p.ff_2.b, TensorClass::Lora);
    push(out, "qk_bias", p.qk_bias, TensorClass::Bias);
    push(out, "b_o", p.b_o, TensorClass::Bias);
    push(out, "b_1", p.b_1, TensorClass::Bias);
    push(out, "b_2", p.b_2, TensorClass::Bias);
    push(out, "ln_gain", p.ln_gain, TensorClass::Norm);
    push(out, "ln_bias", p.ln_bias, TensorClass::Norm);
    push(out, "ln2_gain", p.ln2_gain, TensorClass::Norm);
    push(out, "ln2_bias", p.ln2_bias, TensorClass::Norm);
    return out;
}

Matrix layer_forward(const LayerParams& p, const ModelDims& dims, const LayerConfig& cfg, const Matrix& x,
                     const ForwardOptions& opts, AttentionTrace* trace) {
    p.validate(dims, cfg);
    return detail::dense_forward(detail::densify(p, dims, cfg), x, opts, nullptr, trace);
}

Matrix layer_forward(const CompressedLayerParams& p, const ModelDims& dims, const LayerConfig& cfg, const Matrix& x,
                     const ForwardOptions& opts, AttentionTrace* trace) {
    p.validate(dims, cfg);
    return detail::dense_forward(detail::densify(p, dims, cfg), x, opts, nullptr, trace);
}

namespace {

template <class Params>
LayerGradients<Params> backward_impl(const Params& p, const ModelDims& dims, const LayerConfig& cfg,
                                     const Matrix& x, const Matrix& upstream, const ForwardOptions& opts) {
    p.validate(dims, cfg);
    const auto dense = detail::densify(p, dims, cfg);
    detail::ForwardCache cache;
    detail::dense_forward(dense, x, opts, &cache, nullptr);
    auto g = detail::dense_backward(dense, cache, upstream);
    return LayerGradients<Params>{detail::pull_back(g.grads, p), std::move(g.input), std::move(g.cross_kv)};
}

Matrix zeros(const Matrix& m) { return Matrix(m.rows(), m.cols()); }

FactoredWeight zeros(const FactoredWeight& f) { return {zeros(f.u), zeros(f.v), zeros(f.a), zeros(f.b)}; }

}  // namespace

LayerGradients<LayerParams> layer_backward(const LayerParams& p, const ModelDims& dims, const LayerConfig& cfg,
                                           const Matrix& x, const Matrix& upstream, const ForwardOptions& opts) {
    return backward_impl(p, dims, cfg, x, upstream, opts);
}

LayerGradients<CompressedLayerParams> layer_backward(const CompressedLayerParams& p, const ModelDims& dims,
                                                     const LayerConfig& cfg, const Matrix& x,
                                                     const Matrix& upstream, const ForwardOptions& opts) {
    return backward_impl(p, dims, cfg, x, upstream, opts);
}

LayerParams zeros_like(const LayerParams& p) {
    LayerParams z;
    z.w_q = zeros(p.w_q);
    z.w_k = zeros(p.w_k);
    z.w_v = zeros(p.w_v);
    z.w_o = zeros(p.w_o);
    z.w_1 = zeros(p.w_1);
    z.w_2 = zeros(p.w_2);
    z.b_q = zeros(p.b_q);
    z.b_v = zeros(p.b_v);
    z.b_o = zeros(p.b_o);
    z.b_1 = zeros(p.b_1);
    z.b_2 = zeros(p.b_2);
    z.ln_gain = zeros(p.ln_gain);
    z.ln_bias = zeros(p.ln_bias);
    z.ln2_gain = zeros(p.ln2_gain);
    z.ln2_bias = zeros(p.ln2_bias);
    return z;
}

CompressedLayerParams zeros_like(const CompressedLayerParams& p) {
    CompressedLayerParams z;
    z.ranks = p.ranks;
    z.quantized = p.quantized;
    z.w_q = zeros(p.w_q);
    z.w_k = zeros(p.w_k);
    z.w_v = zeros(p.w_v);
    z.w_o_t = zeros(p.w_o_t);
    z.qk_bias = zeros(p.qk_bias);
    z.ff_1 = zeros(p.ff_1);
    z.ff_2 = zeros(p.ff_2);
    z.b_o = zeros(p.b_o);
    z.b_1 = zeros(p.b_1);
    z.b_2 = zeros(p.b_2);
    z.ln_gain = zeros(p.ln_gain);
    z.ln_bias = zeros(p.ln_bias);
    z.ln2_gain = zeros(p.ln2_gain);
    z.ln2_bias = zeros(p.ln2_bias);
    return z;
}

void Model::validate() const {
    dims.validate();
    if (layers.size() != dims.n_layers) {
        throw ShapeError("model has " + std::to_string(layers.size()) + " layers, dims say " +
                         std::to_string(dims.n_layers));
    }
    expect_shape(token_embedding, dims.vocab, dims.d_model, "token_embedding");
    expect_shape(readout, dims.vocab, dims.d_model, "readout");
    expect_shape(readout_bias, 1, dims.vocab, "readout_bias");
    for (const auto& l : layers) {
        l.validate(dims, config);
    }
}

Matrix positional_encoding(std::size_t length, std::size_t d_model) {
    Matrix pe(length, d_model);
    for (std::size_t pos = 0; pos < length; ++pos) {
        for (std::size_t i = 0; i < d_model; ++i) {
            const double expo = static_cast<double>(2 * (i / 2)) / static_cast<double>(d_model);
            const double angle = static_cast<double>(pos) / std::pow(10000.0, expo);
            pe(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return pe;
}

Matrix embed(const Model& m, std::span<const int> tokens) {
    const std::size_t d = m.dims.d_model;
    Matrix x = positional_encoding(tokens.size(), d);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int t = tokens[i];
        if (t < 0 || static_cast<std::size_t>(t) >= m.dims.vocab) {
            throw InputError("token " + std::to_string(t) + " at position " + std::to_string(i) +
                             " outside vocabulary of " + std::to_string(m.dims.vocab));
        }
        for (std::size_t j = 0; j < d; ++j) {
            x(i, j) += m.token_embedding(static_cast<std::size_t>(t), j);
        }
    }
    return x;
}

Matrix readout_logits(const Model& m, const Matrix& hidden) {
    Matrix logits = matmul_nt(hidden, m.readout);
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            logits(i, j) += m.readout_bias(0, j);
        }
    }
    return logits;
}

Matrix model_forward(const Model& m, std::span<const int> tokens) {
    Matrix x = embed(m, tokens);
    for (std::size_t j = 0; j < m.layers.size(); ++j) {
        ForwardOptions opts{m.causal, nullptr, static_cast<int>(j)};
        x = detail::dense_forward(detail::densify(m.layers[j], m.dims, m.config), x, opts, nullptr, nullptr);
    }
    return readout_logits(m, x);
}

ModelGradients model_backward(const Model& m, std::span<const int> tokens, const Matrix& upstream) {
    const std::size_t L = m.layers.size();
    std::vector<detail::DenseLayer> dense;
    std::vector<detail::ForwardCache> caches(L);
    dense.reserve(L);
    Matrix x = embed(m, tokens);
    for (std::size_t j = 0; j < L; ++j) {
        dense.push_back(detail::densify(m.layers[j], m.dims, m.config));
        ForwardOptions opts{m.causal, nullptr, static_cast<int>(j)};
        x = detail::dense_forward(dense[j], x, opts, &caches[j], nullptr);
    }
    ModelGradients g;
    g.readout = matmul_tn(upstream, x);
    g.readout_bias = Matrix(1, m.dims.vocab);
    for (std::size_t i = 0; i < upstream.rows(); ++i) {
        for (std::size_t v = 0; v < upstream.cols(); ++v) {
            g.readout_bias(0, v) += upstream(i, v);
        }
    }
    Matrix dx = matmul(upstream, m.readout);
    g.layers.resize(L);
    for (std::size_t j = L; j-- > 0;) {
        auto lg = detail::dense_backward(dense[j], caches[j], dx);
        g.layers[j] = detail::pull_back(lg.grads, m.layers[j]);
        dx = std::move(lg.input);
    }
    g.token_embedding = Matrix(m.dims.vocab, m.dims.d_model);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto t = static_cast<std::size_t>(tokens[i]);
        for (std::size_t e = 0; e < m.dims.d_model; ++e) {
            g.token_embedding(t, e) += dx(i, e);
        }
    }
    return g;
}

void HiddenStatePairSet::validate() const {
    if (pairs.empty()) {
        throw InputError("hidden-state pair set for layer " + std::to_string(layer_index) + " is empty");
    }
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        const auto& p = pairs[k];
        if (p.input.cols() != dims.d_model || p.output.cols() != dims.d_model ||
            p.input.rows() != p.output.rows()) {
            throw InputError("pair " + std::to_string(k) + " has shapes " + p.input.shape_string() + " / " +
                             p.output.shape_string() + ", expected width " + std::to_string(dims.d_model));
        }
    }
}

HiddenStatePairSet capture_hidden_states(const Model& m, std::span<const TokenSeq> inputs,
                                         std::size_t layer_index) {
    if (layer_index >= m.layers.size()) {
        throw InputError("layer index " + std::to_string(layer_index) + " out of range for " +
                         std::to_string(m.layers.size()) + " layers");
    }
    std::vector<detail::DenseLayer> dense;
    for (std::size_t j = 0; j <= layer_index; ++j) {
        dense.push_back(detail::densify(m.layers[j], m.dims, m.config));
    }
    HiddenStatePairSet set;
    set.layer_index = layer_index;
    set.dims = m.dims;
    set.causal = m.causal;
    set.pairs.resize(inputs.size());
    for (std::size_t s = 0; s < inputs.size(); ++s) {
        Matrix x = embed(m, inputs[s]);
        for (std::size_t j = 0; j < layer_index; ++j) {
            ForwardOptions opts{m.causal, nullptr, static_cast<int>(j)};
            x = detail::dense_forward(dense[j], x, opts, nullptr, nullptr);
        }
        ForwardOptions opts{m.causal, nullptr, static_cast<int>(layer_index)};
        Matrix y = detail::dense_forward(dense[layer_index], x, opts, nullptr, nullptr);
        set.pairs[s] = HiddenStatePair{std::move(x), std::move(y)};
    }
    return set;
}

std::vector<HiddenStatePairSet> capture_all_hidden_states(const Model& m, std::span<const TokenSeq> inputs) {
    const std::size_t L = m.layers.size();
    std::vector<detail::DenseLayer> dense;
    for (const auto& l : m.layers) {
        dense.push_back(detail::densify(l, m.dims, m.config));
    }
    std::vector<HiddenStatePairSet> sets(L);
    for (std::size_t j = 0; j < L; ++j) {
        sets[j].layer_index = j;
        sets[j].dims = m.dims;
        sets[j].causal = m.causal;
        sets[j].pairs.resize(inputs.size());
    }
    for (std::size_t s = 0; s < inputs.size(); ++s) {
        Matrix x = embed(m, inputs[s]);
        for (std::size_t j = 0; j < L; ++j) {
            ForwardOptions opts{m.causal, nullptr, static_cast<int>(j)};
            Matrix y = detail::dense_forward(dense[j], x, opts, nullptr, nullptr);
            sets[j].pairs[s] = HiddenStatePair{std::move(x), y};
            x = std::move(y);
        }
    }
    return sets;
}

}  // namespace adaptwin
