// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "adaptwin/errors.hpp"
#include "adaptwin/quant.hpp"

namespace adaptwin {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

namespace {

const char* const kConfigKeys[] = {"dims",          "layer_config",   "causal",         "spectral_decay",
                                   "source",        "target",         "ranks",          "plan",
                                   "attn_ratio",    "quantize",       "baseline_bits",  "train",
                                   "finetune",      "workers",        "capture",        "eval",
                                   "seed",          "work_dir",       "sweep"};

void check_keys(const Json& j, std::span<const char* const> allowed, const std::string& where) {
    if (!j.is_object()) {
        throw ConfigError(where + " must be an object");
    }
    for (const auto& [key, value] : j.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
            throw ConfigError("unknown key '" + key + "' in " + where);
        }
    }
}

template <class T>
T get_or(const Json& j, const char* key, T fallback, const std::string& where) {
    const auto it = j.find(key);
    if (it == j.end()) {
        return fallback;
    }
    try {
        if constexpr (std::is_same_v<T, bool>) {
            if (!it->is_boolean()) {
                throw ConfigError(where + "." + key + " must be true or false");
            }
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!it->is_string()) {
                throw ConfigError(where + "." + key + " must be a string");
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!it->is_number()) {
                throw ConfigError(where + "." + key + " must be a number");
            }
        } else {
            if (!it->is_number_integer() || (!it->is_number_unsigned() && it->get<std::int64_t>() < 0)) {
                throw ConfigError(where + "." + key + " must be a nonnegative integer");
            }
        }
        return it->get<T>();
    } catch (const Json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

std::string hash_json(const Json& j) { return sha256_hex(j.dump()); }

}  // namespace

void RunConfig::validate() const {
    dims.validate();
    if (!(layer_config.ln_eps > 0.0)) {
        throw ConfigError("layer_config.ln_eps must be positive");
    }
    if (!(spectral_decay >= 0.0) || !std::isfinite(spectral_decay)) {
        throw ConfigError("spectral_decay must be a finite nonnegative number");
    }
    const int chosen = int(target.has_value()) + int(ranks.has_value()) + int(plan.has_value());
    if (chosen != 1) {
        throw ConfigError("set exactly one of target, ranks or plan");
    }
    if (target && !(*target > 0.0 && *target < 1.0)) {
        throw ConfigError("target must lie in (0, 1)");
    }
    if (!(attn_ratio > 0.0) || !std::isfinite(attn_ratio)) {
        throw ConfigError("attn_ratio must be positive");
    }
    if (baseline_bits != 16 && baseline_bits != 32 && baseline_bits != 64) {
        throw ConfigError("baseline_bits must be 16, 32 or 64");
    }
    train.validate();
    if (workers < 1) {
        throw ConfigError("workers must be at least 1");
    }
    distribution_by_name(capture_distribution, dims);
    if (capture_samples < 1 || eval_samples < 1) {
        throw ConfigError("capture and eval sample counts must be at least 1");
    }
    if (work_dir.empty()) {
        throw ConfigError("work_dir must not be empty");
    }
    for (double t : sweep.targets) {
        if (!(t > 0.0 && t < 1.0)) {
            throw ConfigError("sweep targets must lie in (0, 1)");
        }
    }
    if (sweep.order != "first-to-last" && sweep.order != "greedy") {
        throw ConfigError("sweep.order must be first-to-last or greedy");
    }
    if (sweep.finetune && sweep.epochs < 1) {
        throw ConfigError("sweep.epochs must be at least 1");
    }
    // Plans are checked against the configured dims; a source checkpoint's
    // dims are checked again once it is loaded.
    if (source.empty()) {
        resolve_plan(*this, dims);
    } else if (ranks) {
        ranks->validate_bounds(dims);
    }
}

RunConfig run_config_from_json(const Json& j) {
    check_keys(j, kConfigKeys, "config");
    RunConfig c;
    if (j.contains("dims")) {
        c.dims = dims_from_json(j["dims"]);
    }
    if (j.contains("layer_config")) {
        c.layer_config = layer_config_from_json(j["layer_config"]);
    }
    c.causal = get_or(j, "causal", c.causal, "config");
    c.spectral_decay = get_or(j, "spectral_decay", c.spectral_decay, "config");
    c.source = get_or(j, "source", c.source, "config");
    if (j.contains("ranks") || j.contains("plan")) {
        c.target.reset();
    }
    if (j.contains("target")) {
        c.target = get_or(j, "target", 0.0, "config");
    }
    if (j.contains("ranks")) {
        c.ranks = rank_plan_from_json(j["ranks"]);
    }
    if (j.contains("plan")) {
        c.plan = compression_plan_from_json(j["plan"]);
    }
    c.attn_ratio = get_or(j, "attn_ratio", c.attn_ratio, "config");
    c.quantize = get_or(j, "quantize", c.quantize, "config");
    c.baseline_bits = get_or(j, "baseline_bits", c.baseline_bits, "config");
    if (j.contains("train")) {
        c.train = train_config_from_json(j["train"], c.train);
    }
    c.finetune = get_or(j, "finetune", c.finetune, "config");
    c.workers = get_or(j, "workers", c.workers, "config");
    if (j.contains("capture")) {
        static const char* const keys[] = {"distribution", "samples"};
        check_keys(j["capture"], keys, "capture");
        c.capture_distribution = get_or(j["capture"], "distribution", c.capture_distribution, "capture");
        c.capture_samples = get_or(j["capture"], "samples", c.capture_samples, "capture");
    }
    if (j.contains("eval")) {
        static const char* const keys[] = {"samples"};
        check_keys(j["eval"], keys, "eval");
        c.eval_samples = get_or(j["eval"], "samples", c.eval_samples, "eval");
    }
    if (j.contains("seed")) {
        c.seed = get_or<std::uint64_t>(j, "seed", 0, "config");
    }
    c.work_dir = get_or(j, "work_dir", c.work_dir.string(), "config");
    if (j.contains("sweep")) {
        static const char* const keys[] = {"targets", "order", "finetune", "epochs"};
        const Json& s = j["sweep"];
        check_keys(s, keys, "sweep");
        if (s.contains("targets")) {
            if (!s["targets"].is_array()) {
                throw ConfigError("sweep.targets must be an array");
            }
            c.sweep.targets.clear();
            for (const auto& t : s["targets"]) {
                if (!t.is_number()) {
                    throw ConfigError("sweep.targets must hold numbers");
                }
                c.sweep.targets.push_back(t.get<double>());
            }
        }
        c.sweep.order = get_or(s, "order", c.sweep.order, "sweep");
        c.sweep.finetune = get_or(s, "finetune", c.sweep.finetune, "sweep");
        c.sweep.epochs = get_or(s, "epochs", c.sweep.epochs, "sweep");
    }
    return c;
}

Json to_json(const RunConfig& c) {
    Json j = {{"dims", to_json(c.dims)},
              {"layer_config", to_json(c.layer_config)},
              {"causal", c.causal},
              {"spectral_decay", c.spectral_decay},
              {"source", c.source},
              {"attn_ratio", c.attn_ratio},
              {"quantize", c.quantize},
              {"baseline_bits", c.baseline_bits},
              {"train", to_json(c.train)},
              {"finetune", c.finetune},
              {"workers", c.workers},
              {"capture", {{"distribution", c.capture_distribution}, {"samples", c.capture_samples}}},
              {"eval", {{"samples", c.eval_samples}}},
              {"work_dir", c.work_dir.string()},
              {"sweep",
               {{"targets", c.sweep.targets},
                {"order", c.sweep.order},
                {"finetune", c.sweep.finetune},
                {"epochs", c.sweep.epochs}}}};
    if (c.target) {
        j["target"] = *c.target;
    }
    if (c.ranks) {
        j["ranks"] = to_json(*c.ranks);
    }
    if (c.plan) {
        j["plan"] = to_json(*c.plan);
    }
    if (c.seed) {
        j["seed"] = *c.seed;
    }
    return j;
}

std::string config_hash(const RunConfig& c) {
    Json j = to_json(c);
    j.erase("work_dir");
    j.erase("workers");  // results do not depend on it
    return hash_json(j);
}

StageSeeds derive_seeds(std::uint64_t seed) noexcept {
    return {layer_seed(seed, 1000), layer_seed(seed, 1001), layer_seed(seed, 1002), layer_seed(seed, 1003)};
}

Json to_json(const StageSeeds& s) {
    return {{"model", s.model}, {"capture", s.capture}, {"eval", s.eval}, {"train", s.train}};
}

ToyDistribution distribution_by_name(const std::string& name, const ModelDims& dims) {
    if (name == "narrow") {
        return narrow_distribution(dims);
    }
    if (name == "broad") {
        return broad_distribution(dims);
    }
    throw ConfigError("unknown distribution '" + name + "' (expected narrow or broad)");
}

CompressionPlan resolve_plan(const RunConfig& c, const ModelDims& dims) {
    CompressionPlan p;
    if (c.plan) {
        p = *c.plan;
        if (c.quantize) {
            for (auto& l : p.layers) {
                l.quantize = l.quantize || l.ranks.has_value();
            }
        }
    } else {
        const RankPlan r = c.ranks ? *c.ranks : make_plan(dims, *c.target, c.attn_ratio);
        p = CompressionPlan::uniform(dims.n_layers, r, c.quantize);
    }
    p.validate(dims, false);
    return p;
}

// ---------------------------------------------------------------------------
// Evaluation

TokenSeq mixed_predict(const MixedModel& m, const TokenSeq& input) {
    const Matrix logits = mixed_forward(m, input);
    TokenSeq out(logits.rows());
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        const auto row = logits.row(t);
        out[t] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

double mixed_token_error_rate(const MixedModel& m, ToyTask task, std::span<const TokenSeq> inputs) {
    std::size_t errors = 0, total = 0;
    for (const auto& s : inputs) {
        const TokenSeq target = task_target(task, s);
        errors += edit_distance(mixed_predict(m, s), target);
        total += target.size();
    }
    return total == 0 ? 0.0 : static_cast<double>(errors) / static_cast<double>(total);
}

EvalSet make_eval_set(const Model& reference, const ToyDistribution& dist, std::size_t count, std::uint64_t seed) {
    EvalSet s;
    s.name = dist.name;
    s.inputs = sample_sequences(dist, count, seed);
    if (!reference.layers.empty()) {
        s.pairs = capture_all_hidden_states(reference, s.inputs);
    }
    return s;
}

namespace {

double finite(double v, const std::string& what) {
    if (!std::isfinite(v)) {
        throw NumericalError(what + " is not finite");
    }
    return v;
}

}  // namespace

Json evaluate(const Model& reference, const MixedModel& m, std::span<const EvalSet> sets, std::optional<ToyTask> task,
              unsigned baseline_bits) {
    Json out = {{"accounting", to_json(accounting(m, baseline_bits))}, {"sets", Json::object()}};
    const MixedModel plain = make_mixed(reference);
    for (const auto& s : sets) {
        const Divergence d = logit_divergence(reference, m, s.inputs);
        Json objectives = Json::array();
        for (std::size_t j = 0; j < s.pairs.size(); ++j) {
            objectives.push_back(finite(slot_objective(m, j, s.pairs[j]), "layer objective"));
        }
        Json e = {{"divergence", finite(d.relative, "divergence")},
                  {"agreement", finite(d.agreement, "agreement")},
                  {"layer_objectives", objectives}};
        if (task) {
            e["token_error_rate"] = mixed_token_error_rate(m, *task, s.inputs);
            e["reference_token_error_rate"] = mixed_token_error_rate(plain, *task, s.inputs);
        }
        out["sets"][s.name] = std::move(e);
    }
    return out;
}

std::optional<ToyTask> checkpoint_task(const fs::path& path) {
    const Json h = read_header(path);
    const auto p = h.find("provenance");
    if (p == h.end() || !p->contains("task")) {
        return std::nullopt;
    }
    return parse_toy_task((*p)["task"].get<std::string>());
}

Json successive_curve(const MixedModel& m, std::span<const std::size_t> order, std::span<const EvalSet> sets,
                      unsigned baseline_bits) {
    Json points = Json::array();
    std::vector<std::vector<SweepPoint>> per_set;
    for (const auto& s : sets) {
        per_set.push_back(sweep(m, order, s.inputs, baseline_bits));
    }
    for (std::size_t k = 0; k <= order.size(); ++k) {
        const SweepPoint& p = per_set.front()[k];
        Json e = {{"compressed_layers", p.compressed_layers},
                  {"layers", p.layers},
                  {"retained_fraction", p.retained_fraction},
                  {"removed_fraction", 1.0 - p.retained_fraction},
                  {"byte_fraction", p.byte_fraction}};
        for (std::size_t i = 0; i < sets.size(); ++i) {
            e[sets[i].name] = {{"divergence", per_set[i][k].divergence.relative},
                               {"agreement", per_set[i][k].divergence.agreement}};
        }
        points.push_back(std::move(e));
    }
    return {{"order", Json(std::vector<std::size_t>(order.begin(), order.end()))}, {"points", points}};
}

Json rank_sweep(const Model& reference, std::span<const HiddenStatePairSet> pairs, const RunConfig& c,
                std::span<const EvalSet> sets) {
    const StageSeeds seeds = derive_seeds(c.seed.value_or(0));
    Json points = Json::array();
    TrainConfig tc = c.train;
    tc.seed = seeds.train;
    tc.epochs = c.sweep.epochs;
    LayerwiseOptions opts;
    opts.workers = c.workers;
    opts.train = c.sweep.finetune;
    for (double target : c.sweep.targets) {
        RankPlan ranks;
        try {
            ranks = make_plan(reference.dims, target, c.attn_ratio);
        } catch (const PlanError& e) {
            points.push_back({{"target", target}, {"skipped", e.what()}});
            continue;
        }
        for (bool quant : {false, true}) {
            const CompressionPlan plan = CompressionPlan::uniform(reference.dims.n_layers, ranks, quant);
            const LayerwiseResult r = finetune_all_layers(reference, plan, pairs, tc, opts);
            const SizeReport acc = accounting(r.model, c.baseline_bits);
            Json e = {{"target", target},
                      {"quantized", quant},
                      {"ranks", to_json(ranks)},
                      {"attn_fraction", static_cast<double>(ranks.attn_width()) /
                                            static_cast<double>(reference.dims.head_dim)},
                      {"retained_fraction", acc.retained_fraction},
                      {"removed_fraction", acc.removed_fraction},
                      {"byte_fraction", acc.byte_fraction},
                      {"nominal_byte_fraction", acc.nominal_byte_fraction}};
            for (const auto& s : sets) {
                const Divergence d = logit_divergence(reference, r.model, s.inputs);
                e[s.name] = {{"divergence", d.relative}, {"agreement", d.agreement}};
            }
            points.push_back(std::move(e));
        }
    }
    return {{"finetuned", c.sweep.finetune}, {"epochs", c.sweep.finetune ? c.sweep.epochs : 0}, {"points", points}};
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

using Clock = std::chrono::steady_clock;

/// Wraps a stage so its errors keep their category and name the stage.
template <class F>
auto stage(const char* name, std::ostream* log, F&& f) {
    const auto start = Clock::now();
    try {
        auto result = f();
        if (log) {
            const double secs = std::chrono::duration<double>(Clock::now() - start).count();
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.2f s", secs);
            *log << "[" << name << "] " << buf << "\n";
        }
        return result;
    } catch (const Error& e) {
        throw Error(e.category(), std::string("stage ") + name + ": " + e.what());
    } catch (const std::exception& e) {
        throw Error(ErrorCategory::Io, std::string("stage ") + name + ": " + e.what());
    }
}

/// Stage key stored in an artifact's provenance; a match means the artifact is reusable.
bool reusable(const fs::path& path, const std::string& key) {
    if (!fs::exists(path)) {
        return false;
    }
    try {
        const Json h = read_header(path);
        return h.contains("provenance") && h["provenance"].value("stage_key", std::string()) == key;
    } catch (const FormatError&) {
        return false;  // damaged partial artifact: rebuild it
    }
}

SaveOptions with_key(const std::string& key, Json extra = Json::object()) {
    SaveOptions o;
    extra["stage_key"] = key;
    o.provenance = std::move(extra);
    return o;
}

struct Source {
    Model model;
    fs::path path;
    std::string hash;
};

Source load_source(const RunConfig& c, const StageSeeds& seeds, std::ostream* log) {
    Source s;
    if (!c.source.empty()) {
        s.path = c.source;
        s.model = load_model(s.path);
    } else {
        s.path = c.work_dir / "source.adpt";
        const std::string key = hash_json({{"dims", to_json(c.dims)},
                                           {"layer_config", to_json(c.layer_config)},
                                           {"causal", c.causal},
                                           {"spectral_decay", c.spectral_decay},
                                           {"seed", seeds.model}});
        if (reusable(s.path, key)) {
            s.model = load_model(s.path);
            if (log) {
                *log << "[source] reused " << s.path.string() << "\n";
            }
        } else {
            s.model = gen_toy(c.dims, c.layer_config, seeds.model, c.causal, c.spectral_decay);
            save_checkpoint(s.model, s.path, with_key(key, {{"seed", seeds.model}}));
        }
    }
    s.hash = file_sha256(s.path);
    return s;
}

fs::path pairs_path(const fs::path& dir, std::size_t layer) {
    return dir / "pairs" / ("layer" + std::to_string(layer) + ".adpt");
}

std::vector<HiddenStatePairSet> capture_stage(const RunConfig& c, const Source& src, const StageSeeds& seeds,
                                              std::ostream* log) {
    const std::size_t L = src.model.layers.size();
    const std::string key = hash_json({{"source", src.hash},
                                       {"distribution", c.capture_distribution},
                                       {"samples", c.capture_samples},
                                       {"seed", seeds.capture}});
    bool all_there = true;
    for (std::size_t j = 0; j < L; ++j) {
        all_there = all_there && reusable(pairs_path(c.work_dir, j), key);
    }
    std::vector<HiddenStatePairSet> pairs;
    if (all_there) {
        for (std::size_t j = 0; j < L; ++j) {
            pairs.push_back(load_pairs(pairs_path(c.work_dir, j)));
        }
        if (log) {
            *log << "[capture] reused " << L << " pair sets\n";
        }
        return pairs;
    }
    const ToyDistribution dist = distribution_by_name(c.capture_distribution, src.model.dims);
    const auto inputs = sample_sequences(dist, c.capture_samples, seeds.capture);
    pairs = capture_all_hidden_states(src.model, inputs);
    fs::create_directories(c.work_dir / "pairs");
    for (auto& p : pairs) {
        p.source_hash = src.hash;
        p.distribution = dist.name;
        const fs::path path = pairs_path(c.work_dir, p.layer_index);
        save_pairs(p, path, with_key(key, {{"seed", seeds.capture}}));
        p = load_pairs(path);  // continue from the stored precision, as a resumed run would
    }
    return pairs;
}

Json training_json(const LayerwiseResult& r, const CompressionPlan& plan) {
    Json layers = Json::array();
    for (std::size_t j = 0; j < plan.layers.size(); ++j) {
        Json e = {{"layer", j},
                  {"ranks", plan.layers[j].ranks ? to_json(*plan.layers[j].ranks) : Json(nullptr)},
                  {"quantized", plan.layers[j].quantize}};
        if (r.init_objective[j]) {
            e["init_objective"] = *r.init_objective[j];
            e["final_objective"] = *r.init_objective[j];
        }
        if (r.training[j]) {
            const TrainResult& t = *r.training[j];
            e["final_objective"] = t.best_loss;
            e["best_epoch"] = t.best_epoch;
            e["history"] = t.history;
            if (t.diverged_epoch) {
                e["diverged_epoch"] = *t.diverged_epoch;
            }
        }
        layers.push_back(std::move(e));
    }
    return layers;
}

struct Built {
    MixedModel model;
    Json layers;
};

Built compress_stage(const char* name, const fs::path& path, const Model& source, const CompressionPlan& plan,
                     std::span<const HiddenStatePairSet> pairs, const TrainConfig& tc, bool train,
                     std::size_t workers, const std::string& key, std::ostream* log) {
    if (reusable(path, key)) {
        Built b{load_mixed(path), read_header(path)["provenance"]["layers"]};
        if (log) {
            *log << "[" << name << "] reused " << path.string() << "\n";
        }
        return b;
    }
    LayerwiseOptions opts;
    opts.workers = workers;
    opts.train = train;
    LayerwiseResult r = finetune_all_layers(source, plan, pairs, tc, opts);
    Built b{std::move(r.model), training_json(r, plan)};
    save_checkpoint(b.model, path, with_key(key, {{"layers", b.layers}}));
    b.model = load_mixed(path);
    return b;
}

}  // namespace

Json run_pipeline(const RunConfig& c, std::ostream* log) {
    if (!c.seed) {
        throw ConfigError("the pipeline needs a seed (--seed)");
    }
    c.validate();
    const StageSeeds seeds = derive_seeds(*c.seed);
    fs::create_directories(c.work_dir);

    const Source src = stage("source", log, [&] { return load_source(c, seeds, log); });
    const ModelDims& dims = src.model.dims;
    const CompressionPlan plan = stage("plan", log, [&] {
        CompressionPlan p = resolve_plan(c, dims);
        save_report({{"kind", "plan"}, {"plan", to_json(p)}, {"accounting", to_json(accounting(dims, p, c.baseline_bits))}},
                    c.work_dir / "plan.adpt");
        return p;
    });
    const auto pairs = stage("capture", log, [&] { return capture_stage(c, src, seeds, log); });

    TrainConfig tc = c.train;
    tc.seed = seeds.train;
    const Json base_key = {{"source", src.hash},
                           {"plan", to_json(plan)},
                           {"train", to_json(tc)},
                           {"capture", {c.capture_distribution, c.capture_samples, seeds.capture}}};
    const Built svd = stage("compress", log, [&] {
        return compress_stage("compress", c.work_dir / "compressed.adpt", src.model, plan, pairs, tc, false,
                              c.workers, hash_json({{"base", base_key}, {"stage", "compress"}}), log);
    });
    const Built tuned = stage("finetune", log, [&] {
        if (!c.finetune) {
            return svd;
        }
        const std::string key = hash_json({{"base", base_key}, {"stage", "finetune"}});
        return compress_stage("finetune", c.work_dir / "finetuned.adpt", src.model, plan, pairs, tc, true,
                              c.workers, key, log);
    });

    const std::optional<ToyTask> task = c.source.empty() ? std::nullopt : checkpoint_task(src.path);
    Json report = stage("eval", log, [&] {
        std::vector<EvalSet> sets;
        sets.push_back(make_eval_set(src.model, narrow_distribution(dims), c.eval_samples, seeds.eval));
        sets.push_back(
            make_eval_set(src.model, broad_distribution(dims), c.eval_samples, layer_seed(seeds.eval, 1)));
        Json r = {{"kind", "pipeline"},
                  {"provenance",
                   {{"config_hash", config_hash(c)},
                    {"source_hash", src.hash},
                    {"seed", *c.seed},
                    {"seeds", to_json(seeds)},
                    {"config", to_json(c)}}},
                  {"plan", to_json(plan)},
                  {"layers", tuned.layers},
                  {"svd", evaluate(src.model, svd.model, sets, task, c.baseline_bits)},
                  {"finetuned", evaluate(src.model, tuned.model, sets, task, c.baseline_bits)}};
        r["provenance"]["config"].erase("work_dir");
        if (task) {
            r["task"] = to_string(*task);
        }
        return r;
    });
    stage("report", log, [&] {
        save_report(report, c.work_dir / "report.adpt");
        return 0;
    });
    if (log) {
        print_report(report, *log);
    }
    return report;
}

Json run_sweep(const RunConfig& c, std::ostream* log) {
    const Json base = run_pipeline(c, log);
    const StageSeeds seeds = derive_seeds(*c.seed);
    const Source src = load_source(c, seeds, nullptr);
    const ModelDims& dims = src.model.dims;
    const fs::path tuned_path = c.work_dir / (c.finetune ? "finetuned.adpt" : "compressed.adpt");
    const MixedModel tuned = load_mixed(tuned_path);

    std::vector<EvalSet> sets;
    sets.push_back(make_eval_set(src.model, narrow_distribution(dims), c.eval_samples, seeds.eval));
    sets.push_back(make_eval_set(src.model, broad_distribution(dims), c.eval_samples, layer_seed(seeds.eval, 1)));

    std::vector<std::size_t> order;
    if (c.sweep.order == "greedy") {
        std::vector<double> objectives(dims.n_layers, 0.0);
        for (const auto& l : base["layers"]) {
            if (l.contains("init_objective")) {
                objectives[l["layer"].get<std::size_t>()] = l["init_objective"].get<double>();
            }
        }
        order = greedy_order(objectives);
    } else {
        order = first_to_last_order(dims.n_layers);
    }
    order.erase(std::remove_if(order.begin(), order.end(), [&](std::size_t j) { return !tuned.compressed[j]; }),
                order.end());

    Json report = {{"kind", "sweep"}, {"provenance", base["provenance"]}};
    report["successive"] = stage("sweep-layers", log, [&] {
        return successive_curve(tuned, order, sets, c.baseline_bits);
    });
    report["rank_sweep"] = stage("sweep-ranks", log, [&] {
        std::vector<HiddenStatePairSet> pairs;
        for (std::size_t j = 0; j < dims.n_layers; ++j) {
            pairs.push_back(load_pairs(pairs_path(c.work_dir, j)));
        }
        return rank_sweep(src.model, pairs, c, sets);
    });
    save_report(report, c.work_dir / "sweep.adpt");
    if (log) {
        print_report(report, *log);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Tables

namespace {

std::string fmt(double v, const char* f = "%.6g") {
    char buf[48];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string num(const Json& j, const char* key, const char* f = "%.6g") {
    return j.contains(key) && j[key].is_number() ? fmt(j[key].get<double>(), f) : "-";
}

std::string ranks_text(const Json& r) {
    if (r.is_null()) {
        return "original";
    }
    return "(" + std::to_string(r["attn_rank"].get<std::size_t>()) + "," +
           std::to_string(r["attn_lora"].get<std::size_t>()) + "," + std::to_string(r["ff_rank"].get<std::size_t>()) +
           "," + std::to_string(r["ff_lora"].get<std::size_t>()) + ")";
}

void row(std::ostream& out, std::initializer_list<std::string> cells, std::size_t width = 14) {
    for (const auto& c : cells) {
        out << c;
        for (std::size_t i = c.size(); i < width; ++i) {
            out << ' ';
        }
    }
    out << "\n";
}

void print_eval(const Json& r, std::ostream& out) {
    row(out, {"model", "set", "divergence", "agreement", "token_err", "ref_token_err"});
    for (const char* which : {"model", "svd", "finetuned"}) {
        if (!r.contains(which)) {
            continue;
        }
        for (const auto& [name, e] : r[which]["sets"].items()) {
            row(out, {which, name, num(e, "divergence"), num(e, "agreement", "%.4f"), num(e, "token_error_rate", "%.4f"),
                      num(e, "reference_token_error_rate", "%.4f")});
        }
    }
    const char* last = r.contains("finetuned") ? "finetuned" : r.contains("svd") ? "svd" : "model";
    const Json& acc = r[last]["accounting"];
    out << "retained fraction " << num(acc, "retained_fraction", "%.4f") << ", byte fraction "
        << num(acc, "byte_fraction", "%.4f") << "\n";
}

}  // namespace

void print_report(const Json& r, std::ostream& out) {
    const std::string kind = r.value("kind", std::string());
    if (kind == "pipeline") {
        out << "\nlayers\n";
        row(out, {"layer", "ranks", "quantized", "init_obj", "final_obj", "best_epoch"});
        for (const auto& l : r["layers"]) {
            row(out, {std::to_string(l["layer"].get<std::size_t>()), ranks_text(l["ranks"]),
                      l["quantized"].get<bool>() ? "yes" : "no", num(l, "init_objective"), num(l, "final_objective"),
                      l.contains("best_epoch") ? std::to_string(l["best_epoch"].get<std::size_t>()) : "-"});
        }
        out << "\nevaluation\n";
        print_eval(r, out);
    } else if (kind == "sweep") {
        out << "\nsuccessive layers\n";
        row(out, {"layers", "removed", "bytes", "narrow_div", "broad_div", "narrow_agree", "broad_agree"});
        for (const auto& p : r["successive"]["points"]) {
            row(out, {std::to_string(p["compressed_layers"].get<std::size_t>()), num(p, "removed_fraction", "%.4f"),
                      num(p, "byte_fraction", "%.4f"), num(p["narrow"], "divergence"), num(p["broad"], "divergence"),
                      num(p["narrow"], "agreement", "%.4f"), num(p["broad"], "agreement", "%.4f")});
        }
        out << "\nrank sweep (all layers)\n";
        row(out, {"target", "int8", "ranks", "removed", "bytes", "narrow_div", "broad_div"});
        for (const auto& p : r["rank_sweep"]["points"]) {
            if (p.contains("skipped")) {
                row(out, {num(p, "target", "%.2f"), "-", "infeasible"});
                continue;
            }
            row(out, {num(p, "target", "%.2f"), p["quantized"].get<bool>() ? "yes" : "no", ranks_text(p["ranks"]),
                      num(p, "removed_fraction", "%.4f"), num(p, "byte_fraction", "%.4f"),
                      num(p["narrow"], "divergence"), num(p["broad"], "divergence")});
        }
    } else if (kind == "eval") {
        print_eval(r, out);
    } else {
        out << r.dump(2) << "\n";
    }
}

}  // namespace adaptwin
