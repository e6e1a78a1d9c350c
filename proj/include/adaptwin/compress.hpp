// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "adaptwin/matrix.hpp"
#include "adaptwin/model.hpp"

namespace adaptwin {

/// Factors of a product twin after replacement: p′ = [U_rΣ_r^{1/2}, A], q′ = [Σ_r^{1/2}V_rᵀ; 0].
struct TwinFactors {
    Matrix p;  // d × (r + l)
    Matrix q;  // (r + l) × d′
};

/// Jointly factors the product p·q. LoRA columns of p′ are drawn from N(0, lora_std²);
/// the matching rows of q′ are zero. Throws PlanError unless 1 ≤ r and r + l ≤ p.cols().
TwinFactors twin_factor(const Matrix& p, const Matrix& q, std::size_t r, std::size_t l, std::mt19937_64& rng,
                        double lora_std);

/// Independent factorization of a single weight: u·v is the rank-r truncation of w,
/// a is Gaussian and b is zero. Throws PlanError unless 1 ≤ r and r + l ≤ min(rows, cols).
FactoredWeight compress_ff(const Matrix& w, std::size_t r, std::size_t l, std::mt19937_64& rng, double lora_std);

enum class InitStrategy {
    Svd,      // spectral factors from the SVD, LoRA blocks appended
    Scratch,  // every factor Gaussian, no SVD prior (plan must have zero spectral ranks)
};

struct CompressOptions {
    InitStrategy init = InitStrategy::Svd;
    std::uint64_t seed = 0;
    /// Standard deviation of random factors; ≤ 0 picks 1/√d.
    double lora_std = 0.0;
};

/// Attention part of a compressed layer, head-stacked, with the query and value
/// biases folded into qk_bias and b_o.
struct AttentionFactors {
    Matrix w_q, w_k, w_v, w_o_t;
    Matrix qk_bias;
    Matrix b_o;
};

AttentionFactors compress_attention(const LayerParams& p, const ModelDims& dims, const RankPlan& plan,
                                    std::mt19937_64& rng, const CompressOptions& opts = {});

/// Full layer compression. Biases and norm parameters are carried over.
CompressedLayerParams compress_layer(const LayerParams& p, const ModelDims& dims, const LayerConfig& cfg,
                                     const RankPlan& plan, const CompressOptions& opts = {});

/// Splits a head-stacked matrix into `heads` row blocks, and back.
std::vector<Matrix> split_heads(const Matrix& stacked, std::size_t heads);
Matrix stack_heads(std::span<const Matrix> blocks);

/// Attention-to-feed-forward ratio of removed fractions used by make_plan.
inline constexpr double kDefaultAttnRatio = 0.7;

/// Ranks for a target removed fraction of the attention + feed-forward weights.
/// Attention total rank is rounded to a multiple of 5 (split 4:1), feed-forward to a
/// multiple of 10 (split 9:1). Throws PlanError with the feasible range when the
/// rounded plan leaves the rank bounds.
RankPlan make_plan(const ModelDims& dims, double target_removed_fraction, double attn_ratio = kDefaultAttnRatio);

struct TargetRange {
    double lo = 0.0;
    double hi = 0.0;
    bool empty = true;
};

/// Targets (to 1e-4 resolution) for which make_plan succeeds.
TargetRange feasible_targets(const ModelDims& dims, double attn_ratio = kDefaultAttnRatio);

/// Per-layer choice: keep the original weights or compress with the given ranks.
struct LayerPlan {
    std::optional<RankPlan> ranks;
    bool quantize = false;
    bool operator==(const LayerPlan&) const = default;
};

struct CompressionPlan {
    std::vector<LayerPlan> layers;

    /// Same plan on every layer.
    static CompressionPlan uniform(std::size_t n_layers, const RankPlan& ranks, bool quantize = false);
    std::size_t compressed_count() const noexcept;
    /// Throws PlanError on a wrong layer count, an invalid rank plan, or (when
    /// require_compressed) a plan that compresses nothing.
    void validate(const ModelDims& dims, bool require_compressed = true) const;
    bool operator==(const CompressionPlan&) const = default;
};

/// Bytes of an int8 tensor with one f32 scale per row; empty tensors take none.
std::size_t int8_tensor_bytes(std::size_t rows, std::size_t cols) noexcept;

std::size_t attention_weight_count(const ModelDims& dims) noexcept;
std::size_t ff_weight_count(const ModelDims& dims) noexcept;
std::size_t compressed_attention_count(const ModelDims& dims, const RankPlan& plan) noexcept;
std::size_t compressed_ff_count(const ModelDims& dims, const RankPlan& plan) noexcept;

struct LayerSize {
    bool compressed = false;
    bool quantized = false;
    std::size_t original_weights = 0;  // attention + feed-forward matrices
    std::size_t weights = 0;           // after compression
    std::size_t attn_original = 0, attn_weights = 0;
    std::size_t ff_original = 0, ff_weights = 0;
    std::size_t original_bytes = 0;
    std::size_t bytes = 0;
    double retained() const noexcept;
};

/// Sizes of the compressible weights. Parameter fractions count entries; byte
/// fractions use baseline_bits for full-precision storage and int8 + f32 row scales
/// for quantized factors. nominal_byte_fraction is retained_fraction · 8/baseline_bits
/// on quantized layers, ignoring scales.
struct SizeReport {
    unsigned baseline_bits = 32;
    std::vector<LayerSize> layers;
    std::size_t original_weights = 0;
    std::size_t weights = 0;
    std::size_t original_bytes = 0;
    std::size_t bytes = 0;
    double retained_fraction = 1.0;
    double removed_fraction = 0.0;
    double attn_retained = 1.0;
    double ff_retained = 1.0;
    double byte_fraction = 1.0;
    double nominal_byte_fraction = 1.0;
};

/// Throws ConfigError unless baseline_bits is 16, 32 or 64.
SizeReport accounting(const ModelDims& dims, const CompressionPlan& plan, unsigned baseline_bits = 32);
/// Layer sizes for one layer slot.
LayerSize layer_size(const ModelDims& dims, const LayerPlan& plan, unsigned baseline_bits = 32);
/// Totals and fractions from per-layer sizes.
SizeReport summarize(std::vector<LayerSize> layers, unsigned baseline_bits);

/// Seed for layer j derived from a run seed.
std::uint64_t layer_seed(std::uint64_t seed, std::size_t layer_index) noexcept;

}  // namespace adaptwin
