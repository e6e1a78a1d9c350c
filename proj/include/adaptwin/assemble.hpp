// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adaptwin/compress.hpp"
#include "adaptwin/model.hpp"

namespace adaptwin {

enum class SlotKind { Original, Compressed };

std::string to_string(SlotKind k);

/// A model whose layers can each run the original or the compressed weights.
/// Compressed slots are optional per layer; `active` selects which one runs.
struct MixedModel {
    Model base;
    std::vector<std::optional<CompressedLayerParams>> compressed;
    std::vector<SlotKind> active;
    std::string source_hash;
    std::uint64_t seed = 0;

    /// Throws AssemblyError when slot counts differ from the layer count or an
    /// active compressed slot is missing; ShapeError on inconsistent weights.
    void validate() const;
    std::size_t active_compressed() const noexcept;
    bool operator==(const MixedModel&) const = default;
};

/// All layers original, no compressed slots.
MixedModel make_mixed(Model base);

/// Copy of `m` with one slot changed. Throws AssemblyError when the compressed
/// slot is requested but absent, or the index is out of range.
MixedModel swap(const MixedModel& m, std::size_t layer_index, SlotKind kind);

/// Copy of `m` with exactly the listed layers compressed.
MixedModel with_compressed(const MixedModel& m, std::span<const std::size_t> layers);

Matrix mixed_forward(const MixedModel& m, std::span<const int> tokens);

/// Hidden states after every layer (entry 0 is the embedding).
std::vector<Matrix> mixed_hidden_states(const MixedModel& m, std::span<const int> tokens);

struct Divergence {
    double relative = 0.0;   // ‖Δlogits‖_F / ‖logits‖_F over all inputs
    double agreement = 1.0;  // fraction of positions with equal greedy argmax
};

Divergence logit_divergence(const Model& reference, const MixedModel& m, std::span<const TokenSeq> inputs);

/// Layer objective of the active slot of one layer on that layer's pairs; 0 for
/// an original slot evaluated on its own captured pairs.
double slot_objective(const MixedModel& m, std::size_t layer_index, const HiddenStatePairSet& pairs);

/// Accounting over active slots; quantized slots are stored as int8.
SizeReport accounting(const MixedModel& m, unsigned baseline_bits = 32);

struct SweepPoint {
    std::size_t compressed_layers = 0;
    std::vector<std::size_t> layers;
    double retained_fraction = 1.0;
    double byte_fraction = 1.0;
    Divergence divergence;
};

/// Compresses successive prefixes of `order` (0, 1, …, order.size() layers) and
/// measures divergence from the all-original model. Throws AssemblyError when a
/// listed layer has no compressed slot.
std::vector<SweepPoint> sweep(const MixedModel& m, std::span<const std::size_t> order,
                              std::span<const TokenSeq> inputs, unsigned baseline_bits = 32);

std::vector<std::size_t> first_to_last_order(std::size_t n_layers);
/// Extension: layers sorted by descending per-layer objective (worst layer first).
/// Ties keep layer order.
std::vector<std::size_t> greedy_order(std::span<const double> layer_objectives);

}  // namespace adaptwin
