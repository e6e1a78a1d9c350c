// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "adaptwin/assemble.hpp"
#include "adaptwin/compress.hpp"
#include "adaptwin/finetune.hpp"
#include "adaptwin/store.hpp"
#include "adaptwin/toy.hpp"

namespace adaptwin {

struct SweepConfig {
    /// Removed-weight targets for the rank sweep (all layers compressed).
    std::vector<double> targets{0.3, 0.5, 0.6, 0.8};
    /// "first-to-last" or "greedy" for the successive-layer curve.
    std::string order = "first-to-last";
    /// Fine-tune each rank-sweep point; false keeps the SVD initialization.
    bool finetune = true;
    /// Epochs per rank-sweep point when fine-tuning.
    std::size_t epochs = 10;
};

/// Everything a run needs. Read from a JSON file; unknown keys are rejected.
struct RunConfig {
    ModelDims dims;
    LayerConfig layer_config;
    bool causal = false;
    /// Singular-value decay of generated source weights (see gen_toy).
    double spectral_decay = 1.0;
    /// Source checkpoint; empty generates a toy model from the seed.
    std::string source;

    /// Exactly one of target, ranks (uniform over layers) or plan.
    std::optional<double> target = 0.5;
    std::optional<RankPlan> ranks;
    std::optional<CompressionPlan> plan;
    double attn_ratio = kDefaultAttnRatio;
    bool quantize = false;
    unsigned baseline_bits = 32;

    TrainConfig train;
    /// false skips fine-tuning: the compressed model keeps its SVD initialization.
    bool finetune = true;
    std::size_t workers = 1;

    std::string capture_distribution = "narrow";
    std::size_t capture_samples = 200;
    std::size_t eval_samples = 100;

    /// Master seed; every stage seed derives from it. Required by the pipeline.
    std::optional<std::uint64_t> seed;
    std::filesystem::path work_dir = "adaptwin-run";
    SweepConfig sweep;

    /// Throws ConfigError or PlanError before any compute happens.
    void validate() const;
};

RunConfig run_config_from_json(const Json& j);
Json to_json(const RunConfig& c);
/// SHA-256 of the canonical config with work_dir removed.
std::string config_hash(const RunConfig& c);

struct StageSeeds {
    std::uint64_t model = 0;
    std::uint64_t capture = 0;
    std::uint64_t eval = 0;
    std::uint64_t train = 0;
};
StageSeeds derive_seeds(std::uint64_t seed) noexcept;
Json to_json(const StageSeeds& s);

/// Narrow or broad distribution by name; ConfigError otherwise.
ToyDistribution distribution_by_name(const std::string& name, const ModelDims& dims);

/// The per-layer plan a config asks for on the given dims.
CompressionPlan resolve_plan(const RunConfig& c, const ModelDims& dims);

/// Greedy per-position argmax through a mixed model.
TokenSeq mixed_predict(const MixedModel& m, const TokenSeq& input);
double mixed_token_error_rate(const MixedModel& m, ToyTask task, std::span<const TokenSeq> inputs);

/// Held-out inputs and the original model's hidden-state pairs on them.
struct EvalSet {
    std::string name;
    std::vector<TokenSeq> inputs;
    std::vector<HiddenStatePairSet> pairs;
};
EvalSet make_eval_set(const Model& reference, const ToyDistribution& dist, std::size_t count, std::uint64_t seed);

/// Divergence, agreement, per-layer objectives and (when `task` is set) token
/// error rates of `m` against `reference` on each eval set, plus accounting.
Json evaluate(const Model& reference, const MixedModel& m, std::span<const EvalSet> sets,
              std::optional<ToyTask> task, unsigned baseline_bits = 32);

/// Task recorded in a checkpoint header by train-toy, if any.
std::optional<ToyTask> checkpoint_task(const std::filesystem::path& path);

/// Successive-layer curve over both eval sets.
Json successive_curve(const MixedModel& m, std::span<const std::size_t> order, std::span<const EvalSet> sets,
                      unsigned baseline_bits = 32);

/// Rank sweep: every layer compressed at each target, with and without int8.
/// Training pairs are `pairs` (one set per layer).
Json rank_sweep(const Model& reference, std::span<const HiddenStatePairSet> pairs, const RunConfig& c,
                std::span<const EvalSet> sets);

/// Full run: source → capture → plan → compress → finetune → assemble → eval.
/// Stage artifacts land in c.work_dir and are reused when their provenance
/// matches, so a rerun resumes after the last finished stage. Errors carry the
/// stage name. Progress and tables go to `log` when non-null.
Json run_pipeline(const RunConfig& c, std::ostream* log = nullptr);

/// Sweep on top of a finished (or resumable) pipeline run in c.work_dir.
Json run_sweep(const RunConfig& c, std::ostream* log = nullptr);

/// Plain-text tables for a pipeline or sweep report.
void print_report(const Json& report, std::ostream& out);

}  // namespace adaptwin
