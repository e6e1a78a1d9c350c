// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "adaptwin/finetune.hpp"
#include "adaptwin/matrix.hpp"
#include "adaptwin/model.hpp"

namespace adaptwin {

/// Per-row symmetric int8 tensor: entry (r, c) is codes[r·cols + c] · scales[r].
struct QuantizedTensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> codes;
    std::vector<float> scales;

    /// Storage size: one byte per code plus a 4-byte scale per row (0 when empty).
    std::size_t bytes() const noexcept;
    bool operator==(const QuantizedTensor&) const = default;
};

/// scale = absmax/127 rounded to f32 (1 for an all-zero row); codes are
/// entry/scale rounded half to even and clamped to ±127.
/// Throws NumericalError on non-finite input.
QuantizedTensor quantize(const Matrix& m);
Matrix dequantize(const QuantizedTensor& q);
/// dequantize(quantize(m)).
Matrix fake_quantize(const Matrix& m);

/// 1 where the straight-through estimator passes the gradient (inside the clamp range).
Matrix ste_mask(const Matrix& m);

enum class QuantLevel { None, Int8 };

/// Factor matrices (attention stacks and both feed-forward factor pairs) replaced by
/// their int8-representable values; biases and norms untouched.
CompressedLayerParams quantize_layer(const CompressedLayerParams& p);

/// Fake quantization of the factor matrices with straight-through gradients.
ForwardTransform int8_transform();

/// Quantization-aware fine-tuning: forward passes see quantized factors, the history
/// and best iterate are judged on the quantized objective, and the returned
/// parameters are quantized. Level None is plain finetune_layer.
TrainResult finetune_layer_quantized(const CompressedLayerParams& init, const HiddenStatePairSet& pairs,
                                     const LayerConfig& cfg, const TrainConfig& train,
                                     QuantLevel level = QuantLevel::Int8);

/// Baseline: full-precision fine-tuning followed by one quantization. best_loss is
/// the objective at the quantized parameters.
TrainResult post_training_quantize(const CompressedLayerParams& init, const HiddenStatePairSet& pairs,
                                   const LayerConfig& cfg, const TrainConfig& train);

}  // namespace adaptwin
