// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "adaptwin/model.hpp"

namespace adaptwin {

/// Synthetic token-sequence distribution.
struct ToyDistribution {
    std::string name;
    std::size_t alphabet = 0;  // tokens drawn uniformly from [0, alphabet)
    std::size_t min_len = 0;
    std::size_t max_len = 0;

    /// Throws ConfigError on empty ranges or an alphabet larger than vocab.
    void validate(std::size_t vocab) const;
    bool operator==(const ToyDistribution&) const = default;
};

/// Small fixed sub-alphabet (vocab/4) at fixed length 12: the adaptation target.
ToyDistribution narrow_distribution(const ModelDims& dims);
/// Full alphabet at lengths 4..20: the generalization check.
ToyDistribution broad_distribution(const ModelDims& dims);

std::vector<TokenSeq> sample_sequences(const ToyDistribution& dist, std::size_t count, std::uint64_t seed);

/// Random toy transformer, deterministic per seed. Weights are rounded to f32 so a
/// saved checkpoint reloads bit-identically.
///
/// With `spectral_decay` = α > 0 every projection (per head for the attention
/// stacks) keeps its singular vectors but gets singular values ∝ (i+1)^-α at an
/// unchanged Frobenius norm, mimicking the decaying spectra of trained weights.
Model gen_toy(const ModelDims& dims, const LayerConfig& cfg, std::uint64_t seed, bool causal = false,
              double spectral_decay = 0.0);

enum class ToyTask { Copy, Reverse };

std::string to_string(ToyTask t);
ToyTask parse_toy_task(const std::string& s);
TokenSeq task_target(ToyTask task, const TokenSeq& input);

/// Greedy per-position argmax of the logits.
TokenSeq predict(const Model& m, const TokenSeq& input);

/// Levenshtein distance over tokens.
std::size_t edit_distance(std::span<const int> a, std::span<const int> b);

/// Fraction of positions predicted correctly.
double token_accuracy(const Model& m, ToyTask task, std::span<const TokenSeq> inputs);
/// Σ edit_distance(prediction, target) / Σ |target|.
double token_error_rate(const Model& m, ToyTask task, std::span<const TokenSeq> inputs);

struct ToyTrainConfig {
    ToyTask task = ToyTask::Copy;
    std::size_t steps = 5000;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    std::size_t eval_count = 200;

    void validate() const;
};

struct ToyTrainResult {
    Model model;
    std::vector<double> loss;  // mean cross-entropy per step
    double accuracy = 0.0;     // held-out token accuracy on the broad distribution
    std::size_t steps_run = 0;
};

/// End-to-end cross-entropy training with Adam on sequences from the broad
/// distribution. A non-finite loss stops training at the last finite step.
ToyTrainResult train_toy(const Model& init, const ToyTrainConfig& cfg);

/// Every trainable tensor of a model: embedding, readout, readout bias, layers.
std::vector<ParamRef> parameters(Model& m);

}  // namespace adaptwin
