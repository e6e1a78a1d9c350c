// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adaptwin/assemble.hpp"
#include "adaptwin/compress.hpp"
#include "adaptwin/model.hpp"
#include "adaptwin/optim.hpp"

namespace adaptwin {

/// Which parameters are initialized how and which ones train.
enum class TrainMode {
    All,           // SVD init; spectral, LoRA, biases and norms train
    SpectralOnly,  // SVD init at rank r + l with no LoRA; spectral, biases and norms train
    Scratch,       // Gaussian factors of total rank r + l, no SVD prior; everything trains
    LoraOnly,      // SVD init; spectral frozen, LoRA, biases and norms train
};

std::string to_string(TrainMode m);
/// Accepts "all", "spectral-only", "scratch", "lora-only".
TrainMode parse_train_mode(const std::string& s);

struct TrainConfig {
    std::size_t epochs = 40;
    std::size_t batch_size = 16;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    TrainMode mode = TrainMode::All;
    std::uint64_t seed = 0;
    bool quantization_aware = false;
    /// Throw TrainingError on a non-finite objective instead of stopping at the best iterate.
    bool throw_on_divergence = false;
    /// Spread per-sample gradients over OpenMP threads (results do not depend on it).
    bool parallel_samples = true;

    /// Throws ConfigError.
    void validate() const;
    AdamConfig adam() const { return {lr, beta1, beta2, eps}; }
};

/// The ranks a mode actually allocates for a requested plan: spectral-only folds the
/// LoRA budget into the spectral rank, scratch makes everything LoRA-style factors.
RankPlan mode_plan(const RankPlan& plan, TrainMode mode);

/// Compressed starting point for a mode (SVD or Gaussian init per mode_plan).
CompressedLayerParams init_for_mode(const LayerParams& original, const ModelDims& dims, const LayerConfig& cfg,
                                    const RankPlan& plan, TrainMode mode, std::uint64_t seed);

bool is_trainable(TrainMode mode, TensorClass cls) noexcept;

/// Row masks for parameters(p) under a mode.
RowMask trainable_rows(CompressedLayerParams& p, TrainMode mode);

/// Mean over pairs of ‖T(X_i) − X_o‖_F². Throws ShapeError on width mismatch.
double layer_objective(const CompressedLayerParams& p, const HiddenStatePairSet& pairs, const LayerConfig& cfg);

/// Gradient of layer_objective over a subset of pairs (all when `indices` is empty),
/// scaled as the mean over that subset.
struct ObjectiveGradient {
    double loss = 0.0;
    CompressedLayerParams grads;
};
ObjectiveGradient objective_gradient(const CompressedLayerParams& p, const HiddenStatePairSet& pairs,
                                     const LayerConfig& cfg, std::span<const std::size_t> indices = {},
                                     bool parallel = true);

/// Maps master parameters to the ones the forward pass sees and routes gradients
/// back (fake quantization with a straight-through estimator).
struct ForwardTransform {
    std::function<CompressedLayerParams(const CompressedLayerParams&)> apply;
    /// Adjusts gradients taken at apply(master) into gradients for master; identity when empty.
    std::function<void(const CompressedLayerParams& master, CompressedLayerParams& grads)> backward;
};

struct TrainResult {
    CompressedLayerParams params;  // best iterate (after the transform, when one was used)
    std::vector<double> history;   // entry 0: initial objective; then one per completed epoch
    double initial_loss = 0.0;
    double best_loss = 0.0;
    std::size_t best_epoch = 0;
    std::optional<std::size_t> diverged_epoch;
};

/// Mini-batch Adam on the layer objective. The returned parameters are the best
/// iterate seen, so best_loss ≤ initial_loss. Deterministic for a fixed seed.
TrainResult finetune_layer(const CompressedLayerParams& init, const HiddenStatePairSet& pairs,
                           const LayerConfig& cfg, const TrainConfig& train, const ForwardTransform* transform = nullptr);

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-5;
    TrainMode mode = TrainMode::All;
};

struct TensorCheck {
    std::string name;
    TensorClass cls = TensorClass::Spectral;
    double analytic_norm = 0.0;
    double numeric_norm = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<TensorCheck> tensors;  // attention stacks appear once per row class
    double max_rel_error = 0.0;
    double grad_norm = 0.0;  // ‖analytic gradient‖ over all trainable entries
    bool passed = false;
    /// Largest error per class, or nullopt when no tensor of that class trains.
    std::optional<double> class_error(TensorClass c) const;
};

/// Central differences of layer_objective against the analytic gradient, for
/// every trainable tensor. Errors are norm-wise relative per tensor and row class.
GradCheckReport grad_check(const CompressedLayerParams& p, const HiddenStatePairSet& pairs, const LayerConfig& cfg,
                           const GradCheckOptions& opts = {});

struct LayerwiseOptions {
    /// Concurrent layer jobs; 1 trains layers one after another.
    std::size_t workers = 1;
    /// Train after compressing; false keeps the SVD initialization.
    bool train = true;
};

struct LayerwiseResult {
    MixedModel model;  // compressed slots active on planned layers
    std::vector<std::optional<TrainResult>> training;
    std::vector<std::optional<double>> init_objective;
};

/// Compresses and fine-tunes each planned layer against the original model's
/// pairs. `pairs[j]` must hold layer j's pairs for every planned layer. Layers
/// are independent; results do not depend on `workers`. Layers marked for
/// quantization go through quantization-aware training.
LayerwiseResult finetune_all_layers(const Model& model, const CompressionPlan& plan,
                                    std::span<const HiddenStatePairSet> pairs, const TrainConfig& train,
                                    const LayerwiseOptions& opts = {});

/// As above, capturing pairs from `inputs` first.
LayerwiseResult finetune_all_layers(const Model& model, const CompressionPlan& plan, std::span<const TokenSeq> inputs,
                                    const TrainConfig& train, const LayerwiseOptions& opts = {});

}  // namespace adaptwin
