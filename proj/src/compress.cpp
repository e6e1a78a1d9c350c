// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/compress.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "adaptwin/errors.hpp"
#include "adaptwin/linalg.hpp"

namespace adaptwin {

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double std) {
    std::normal_distribution<double> nd(0.0, std);
    Matrix m(rows, cols);
    for (auto& v : m.values()) {
        v = nd(rng);
    }
    return m;
}

double resolve_std(const CompressOptions& opts, const ModelDims& dims) {
    return opts.lora_std > 0 ? opts.lora_std : 1.0 / std::sqrt(static_cast<double>(dims.d_model));
}

void check_ranks(std::size_t r, std::size_t l, std::size_t cap, const char* what) {
    if (r < 1 || r + l > cap) {
        throw PlanError(std::string(what) + ": ranks r=" + std::to_string(r) + ", l=" + std::to_string(l) +
                        " need 1 <= r and r + l <= " + std::to_string(cap));
    }
}

Matrix head_rows(const Matrix& m, std::size_t h, std::size_t dh) { return slice_rows(m, h * dh, (h + 1) * dh); }

}  // namespace

TwinFactors twin_factor(const Matrix& p, const Matrix& q, std::size_t r, std::size_t l, std::mt19937_64& rng,
                        double lora_std) {
    if (p.cols() != q.rows()) {
        throw ShapeError("twin factors " + p.shape_string() + " and " + q.shape_string() + " do not chain");
    }
    check_ranks(r, l, p.cols(), "twin_factor");
    const auto spectral = truncate(svd(matmul(p, q)), r);
    const Matrix lora_a = gaussian(p.rows(), l, rng, lora_std);
    const Matrix left[] = {spectral.left, lora_a};
    const Matrix right[] = {spectral.right, Matrix(l, q.cols())};
    return {hstack(left), vstack(right)};
}

FactoredWeight compress_ff(const Matrix& w, std::size_t r, std::size_t l, std::mt19937_64& rng, double lora_std) {
    check_ranks(r, l, std::min(w.rows(), w.cols()), "compress_ff");
    auto spectral = truncate(svd(w), r);
    FactoredWeight f;
    f.u = std::move(spectral.left);
    f.v = std::move(spectral.right);
    f.a = gaussian(w.rows(), l, rng, lora_std);
    f.b = Matrix(l, w.cols());
    return f;
}

AttentionFactors compress_attention(const LayerParams& p, const ModelDims& dims, const RankPlan& plan,
                                    std::mt19937_64& rng, const CompressOptions& opts) {
    const std::size_t d = dims.d_model, dh = dims.head_dim, H = dims.heads;
    const double sd = resolve_std(opts, dims);
    const std::size_t k = plan.attn_width();
    if (k == 0 || k > dh) {
        throw PlanError("attention width r_a + l_a = " + std::to_string(k) + " outside 1.." + std::to_string(dh));
    }
    std::vector<Matrix> wq(H), wk(H), wv(H), wo(H);
    for (std::size_t h = 0; h < H; ++h) {
        if (opts.init == InitStrategy::Scratch) {
            wq[h] = gaussian(k, d, rng, sd);
            wk[h] = gaussian(k, d, rng, sd);
            wv[h] = gaussian(k, d, rng, sd);
            wo[h] = gaussian(k, d, rng, sd);
            continue;
        }
        // (W_Qhᵀ, W_Kh) and (W_Vhᵀ, W_Ohᵀ) are the product twins of head h.
        auto qk = twin_factor(transpose(head_rows(p.w_q, h, dh)), head_rows(p.w_k, h, dh), plan.attn_rank,
                              plan.attn_lora, rng, sd);
        auto vo = twin_factor(transpose(head_rows(p.w_v, h, dh)), transpose(slice_cols(p.w_o, h * dh, (h + 1) * dh)),
                              plan.attn_rank, plan.attn_lora, rng, sd);
        wq[h] = transpose(qk.p);
        wk[h] = std::move(qk.q);
        wv[h] = transpose(vo.p);
        wo[h] = std::move(vo.q);
    }
    AttentionFactors out;
    out.w_q = stack_heads(wq);
    out.w_k = stack_heads(wk);
    out.w_v = stack_heads(wv);
    out.w_o_t = stack_heads(wo);

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    if (!p.b_q.empty()) {
        // (W_Qh x_i + b_qh)ᵀ W_Kh x_j splits into the twin product plus x_j · (W_Khᵀ b_qh).
        out.qk_bias = Matrix(H, d);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t c = 0; c < dh; ++c) {
                const double bq = p.b_q(0, h * dh + c) * scale;
                for (std::size_t e = 0; e < d; ++e) {
                    out.qk_bias(h, e) += bq * p.w_k(h * dh + c, e);
                }
            }
        }
    }
    // Attention rows sum to one, so the value bias passes straight through W_O.
    if (!p.b_o.empty() || !p.b_v.empty()) {
        out.b_o = p.b_o.empty() ? Matrix(1, d) : p.b_o;
        if (!p.b_v.empty()) {
            out.b_o += matmul_nt(p.b_v, p.w_o);
        }
    }
    return out;
}

CompressedLayerParams compress_layer(const LayerParams& p, const ModelDims& dims, const LayerConfig& cfg,
                                     const RankPlan& plan, const CompressOptions& opts) {
    p.validate(dims, cfg);
    if (opts.init == InitStrategy::Svd) {
        plan.validate(dims);
    } else {
        plan.validate_bounds(dims);
        if (plan.attn_rank != 0 || plan.ff_rank != 0) {
            throw PlanError("scratch initialization takes a plan with zero spectral ranks");
        }
    }
    std::mt19937_64 rng(opts.seed);
    auto attn = compress_attention(p, dims, plan, rng, opts);
    CompressedLayerParams c;
    c.ranks = plan;
    c.w_q = std::move(attn.w_q);
    c.w_k = std::move(attn.w_k);
    c.w_v = std::move(attn.w_v);
    c.w_o_t = std::move(attn.w_o_t);
    c.qk_bias = std::move(attn.qk_bias);
    c.b_o = std::move(attn.b_o);
    const double sd = resolve_std(opts, dims);
    if (opts.init == InitStrategy::Svd) {
        c.ff_1 = compress_ff(p.w_1, plan.ff_rank, plan.ff_lora, rng, sd);
        c.ff_2 = compress_ff(p.w_2, plan.ff_rank, plan.ff_lora, rng, sd);
    } else {
        const std::size_t kf = plan.ff_lora;
        c.ff_1 = {Matrix(dims.d_ff, 0), Matrix(0, dims.d_model), gaussian(dims.d_ff, kf, rng, sd),
                  gaussian(kf, dims.d_model, rng, sd)};
        c.ff_2 = {Matrix(dims.d_model, 0), Matrix(0, dims.d_ff), gaussian(dims.d_model, kf, rng, sd),
                  gaussian(kf, dims.d_ff, rng, sd)};
    }
    c.b_1 = p.b_1;
    c.b_2 = p.b_2;
    c.ln_gain = p.ln_gain;
    c.ln_bias = p.ln_bias;
    c.ln2_gain = p.ln2_gain;
    c.ln2_bias = p.ln2_bias;
    return c;
}

std::vector<Matrix> split_heads(const Matrix& stacked, std::size_t heads) {
    if (heads == 0 || stacked.rows() % heads != 0) {
        throw ShapeError("cannot split " + stacked.shape_string() + " into " + std::to_string(heads) + " heads");
    }
    const std::size_t k = stacked.rows() / heads;
    std::vector<Matrix> out;
    out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        out.push_back(slice_rows(stacked, h * k, (h + 1) * k));
    }
    return out;
}

Matrix stack_heads(std::span<const Matrix> blocks) { return vstack(blocks); }

namespace {

struct PlanSolve {
    double attn_total = 0;
    double ff_total = 0;
    std::size_t attn_rounded = 0;
    std::size_t ff_rounded = 0;
};

PlanSolve solve_plan(const ModelDims& dims, double target, double ratio) {
    const double d = static_cast<double>(dims.d_model);
    const double dff = static_cast<double>(dims.d_ff);
    const double attn = 4.0 * d * d;
    const double ff = 2.0 * d * dff;
    // removed_attn = ratio · removed_ff, weighted by parameter counts.
    const double removed_ff = target * (attn + ff) / (ratio * attn + ff);
    const double removed_attn = ratio * removed_ff;
    PlanSolve s;
    s.attn_total = (1.0 - removed_attn) * static_cast<double>(dims.head_dim);
    s.ff_total = (1.0 - removed_ff) * d * dff / (d + dff);
    const double a = std::max(0.0, std::round(s.attn_total / 5.0));
    const double f = std::max(0.0, std::round(s.ff_total / 10.0));
    s.attn_rounded = static_cast<std::size_t>(a) * 5;
    s.ff_rounded = static_cast<std::size_t>(f) * 10;
    return s;
}

bool plan_fits(const ModelDims& dims, const PlanSolve& s) {
    return s.attn_rounded >= 5 && s.attn_rounded <= dims.head_dim && s.ff_rounded >= 10 &&
           s.ff_rounded <= std::min(dims.d_model, dims.d_ff);
}

}  // namespace

TargetRange feasible_targets(const ModelDims& dims, double attn_ratio) {
    TargetRange range;
    for (int i = 1; i < 10000; ++i) {
        const double t = i * 1e-4;
        if (plan_fits(dims, solve_plan(dims, t, attn_ratio))) {
            if (range.empty) {
                range.lo = t;
                range.empty = false;
            }
            range.hi = t;
        }
    }
    return range;
}

RankPlan make_plan(const ModelDims& dims, double target, double attn_ratio) {
    dims.validate();
    if (!(target > 0.0 && target < 1.0)) {
        throw PlanError("target removed fraction must lie in (0, 1), got " + std::to_string(target));
    }
    if (!(attn_ratio > 0.0)) {
        throw PlanError("attention ratio must be positive");
    }
    const PlanSolve s = solve_plan(dims, target, attn_ratio);
    if (!plan_fits(dims, s)) {
        const TargetRange range = feasible_targets(dims, attn_ratio);
        std::ostringstream msg;
        msg << "target " << target << " gives attention rank total " << s.attn_rounded << " (bound 5.."
            << dims.head_dim << ") and feed-forward total " << s.ff_rounded << " (bound 10.."
            << std::min(dims.d_model, dims.d_ff) << "); ";
        if (range.empty) {
            msg << "no target is feasible for these dims";
        } else {
            msg << "feasible targets are about [" << range.lo << ", " << range.hi << "]";
        }
        throw PlanError(msg.str());
    }
    RankPlan plan;
    plan.attn_rank = s.attn_rounded / 5 * 4;
    plan.attn_lora = s.attn_rounded / 5;
    plan.ff_rank = s.ff_rounded / 10 * 9;
    plan.ff_lora = s.ff_rounded / 10;
    return plan;
}

CompressionPlan CompressionPlan::uniform(std::size_t n_layers, const RankPlan& ranks, bool quantize) {
    CompressionPlan p;
    p.layers.assign(n_layers, LayerPlan{ranks, quantize});
    return p;
}

std::size_t CompressionPlan::compressed_count() const noexcept {
    return static_cast<std::size_t>(
        std::count_if(layers.begin(), layers.end(), [](const LayerPlan& l) { return l.ranks.has_value(); }));
}

void CompressionPlan::validate(const ModelDims& dims, bool require_compressed) const {
    if (layers.size() != dims.n_layers) {
        throw PlanError("plan covers " + std::to_string(layers.size()) + " layers, model has " +
                        std::to_string(dims.n_layers));
    }
    for (std::size_t j = 0; j < layers.size(); ++j) {
        if (!layers[j].ranks) {
            if (layers[j].quantize) {
                throw PlanError("layer " + std::to_string(j) + " keeps its original weights but asks for quantization");
            }
            continue;
        }
        try {
            layers[j].ranks->validate(dims);
        } catch (const PlanError& e) {
            throw PlanError("layer " + std::to_string(j) + ": " + e.what());
        }
    }
    if (require_compressed && compressed_count() == 0) {
        throw PlanError("plan compresses no layer");
    }
}

std::size_t int8_tensor_bytes(std::size_t rows, std::size_t cols) noexcept {
    return rows * cols == 0 ? 0 : rows * cols + 4 * rows;
}

std::size_t attention_weight_count(const ModelDims& dims) noexcept { return 4 * dims.d_model * dims.d_model; }

std::size_t ff_weight_count(const ModelDims& dims) noexcept { return 2 * dims.d_model * dims.d_ff; }

std::size_t compressed_attention_count(const ModelDims& dims, const RankPlan& plan) noexcept {
    return 4 * dims.heads * plan.attn_width() * dims.d_model;
}

std::size_t compressed_ff_count(const ModelDims& dims, const RankPlan& plan) noexcept {
    return 2 * plan.ff_width() * (dims.d_model + dims.d_ff);
}

double LayerSize::retained() const noexcept {
    return original_weights == 0 ? 1.0 : static_cast<double>(weights) / static_cast<double>(original_weights);
}

namespace {

void check_bits(unsigned bits) {
    if (bits != 16 && bits != 32 && bits != 64) {
        throw ConfigError("baseline bits must be 16, 32 or 64, got " + std::to_string(bits));
    }
}

std::size_t quantized_layer_bytes(const ModelDims& dims, const RankPlan& r) {
    const std::size_t d = dims.d_model, dff = dims.d_ff;
    const std::size_t rows = dims.heads * r.attn_width();
    std::size_t bytes = 4 * int8_tensor_bytes(rows, d);
    // ff_1 = u (d_ff × r) v (r × d) + a (d_ff × l) b (l × d); ff_2 mirrors it.
    bytes += int8_tensor_bytes(dff, r.ff_rank) + int8_tensor_bytes(r.ff_rank, d);
    bytes += int8_tensor_bytes(dff, r.ff_lora) + int8_tensor_bytes(r.ff_lora, d);
    bytes += int8_tensor_bytes(d, r.ff_rank) + int8_tensor_bytes(r.ff_rank, dff);
    bytes += int8_tensor_bytes(d, r.ff_lora) + int8_tensor_bytes(r.ff_lora, dff);
    return bytes;
}

}  // namespace

LayerSize layer_size(const ModelDims& dims, const LayerPlan& plan, unsigned baseline_bits) {
    check_bits(baseline_bits);
    const std::size_t width = baseline_bits / 8;
    LayerSize s;
    s.attn_original = attention_weight_count(dims);
    s.ff_original = ff_weight_count(dims);
    s.original_weights = s.attn_original + s.ff_original;
    s.original_bytes = s.original_weights * width;
    if (!plan.ranks) {
        s.attn_weights = s.attn_original;
        s.ff_weights = s.ff_original;
        s.weights = s.original_weights;
        s.bytes = s.original_bytes;
        return s;
    }
    s.compressed = true;
    s.quantized = plan.quantize;
    s.attn_weights = compressed_attention_count(dims, *plan.ranks);
    s.ff_weights = compressed_ff_count(dims, *plan.ranks);
    s.weights = s.attn_weights + s.ff_weights;
    s.bytes = plan.quantize ? quantized_layer_bytes(dims, *plan.ranks) : s.weights * width;
    return s;
}

SizeReport summarize(std::vector<LayerSize> layers, unsigned baseline_bits) {
    check_bits(baseline_bits);
    SizeReport r;
    r.baseline_bits = baseline_bits;
    std::size_t attn_o = 0, attn_w = 0, ff_o = 0, ff_w = 0;
    double nominal = 0.0;
    for (const auto& l : layers) {
        r.original_weights += l.original_weights;
        r.weights += l.weights;
        r.original_bytes += l.original_bytes;
        r.bytes += l.bytes;
        attn_o += l.attn_original;
        attn_w += l.attn_weights;
        ff_o += l.ff_original;
        ff_w += l.ff_weights;
        nominal += static_cast<double>(l.weights) * (l.quantized ? 8.0 / baseline_bits : 1.0);
    }
    r.layers = std::move(layers);
    if (r.original_weights > 0) {
        const double total = static_cast<double>(r.original_weights);
        r.retained_fraction = static_cast<double>(r.weights) / total;
        r.removed_fraction = 1.0 - r.retained_fraction;
        r.attn_retained = static_cast<double>(attn_w) / static_cast<double>(attn_o);
        r.ff_retained = static_cast<double>(ff_w) / static_cast<double>(ff_o);
        r.byte_fraction = static_cast<double>(r.bytes) / static_cast<double>(r.original_bytes);
        r.nominal_byte_fraction = nominal / total;
    }
    return r;
}

SizeReport accounting(const ModelDims& dims, const CompressionPlan& plan, unsigned baseline_bits) {
    std::vector<LayerSize> layers;
    layers.reserve(plan.layers.size());
    for (const auto& l : plan.layers) {
        layers.push_back(layer_size(dims, l, baseline_bits));
    }
    return summarize(std::move(layers), baseline_bits);
}

std::uint64_t layer_seed(std::uint64_t seed, std::size_t layer_index) noexcept {
    // splitmix64 finalizer over the combined value.
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(layer_index) + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace adaptwin
