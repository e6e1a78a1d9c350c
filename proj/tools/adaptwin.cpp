// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

// adaptwin: toy-model generation, layer-wise compression and evaluation.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "adaptwin/errors.hpp"
#include "adaptwin/pipeline.hpp"
#include "adaptwin/quant.hpp"

using namespace adaptwin;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::string work_dir;
    std::optional<double> target;
    std::optional<std::size_t> epochs;
    std::optional<double> lr;
    std::string mode;
    std::optional<std::size_t> workers;
    bool quantize = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("-c,--config", c.config_path, "JSON run config")->check(CLI::ExistingFile);
    cmd->add_option("--set", c.sets, "Override a config value: dotted.key=JSON");
    cmd->add_option("--seed", c.seed, "Master seed");
    cmd->add_option("--work-dir", c.work_dir, "Directory for stage artifacts");
    cmd->add_option("--target", c.target, "Target removed fraction of attention + feed-forward weights");
    cmd->add_option("--epochs", c.epochs, "Fine-tuning epochs");
    cmd->add_option("--lr", c.lr, "Fine-tuning learning rate");
    cmd->add_option("--mode", c.mode, "Training mode: all, spectral-only, scratch, lora-only");
    cmd->add_option("--workers", c.workers, "Concurrent layer jobs");
    cmd->add_flag("--quantize", c.quantize, "Quantize compressed factors to int8 (quantization-aware)");
}

Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

void apply_set(Json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("--set expects key=value, got '" + assignment + "'");
    }
    const std::string value = assignment.substr(eq + 1);
    Json v;
    try {
        v = Json::parse(value);
    } catch (const Json::parse_error&) {
        v = value;  // bare strings need no quotes
    }
    std::string key = assignment.substr(0, eq);
    Json* node = &j;
    for (std::size_t dot; (dot = key.find('.')) != std::string::npos; key = key.substr(dot + 1)) {
        node = &(*node)[key.substr(0, dot)];
        if (!node->is_object()) {
            *node = Json::object();
        }
    }
    if (v.is_null()) {
        node->erase(key);
    } else {
        (*node)[key] = v;
    }
}

RunConfig load_config(const Common& c) {
    Json j = c.config_path.empty() ? Json::object() : read_json_file(c.config_path);
    for (const auto& s : c.sets) {
        apply_set(j, s);
    }
    if (c.seed) {
        j["seed"] = *c.seed;
    }
    if (!c.work_dir.empty()) {
        j["work_dir"] = c.work_dir;
    }
    if (c.target) {
        j.erase("ranks");
        j.erase("plan");
        j["target"] = *c.target;
    }
    if (c.epochs) {
        j["train"]["epochs"] = *c.epochs;
    }
    if (c.lr) {
        j["train"]["lr"] = *c.lr;
    }
    if (!c.mode.empty()) {
        j["train"]["mode"] = c.mode;
    }
    if (c.workers) {
        j["workers"] = *c.workers;
    }
    if (c.quantize) {
        j["quantize"] = true;
    }
    return run_config_from_json(j);
}

std::uint64_t require_seed(const RunConfig& c) {
    if (!c.seed) {
        throw ConfigError("--seed is required");
    }
    return *c.seed;
}

Json provenance(const RunConfig& c, Json extra = Json::object()) {
    extra["config_hash"] = config_hash(c);
    if (c.seed) {
        extra["seed"] = *c.seed;
        extra["seeds"] = to_json(derive_seeds(*c.seed));
    }
    return extra;
}

SaveOptions save_opts(Json prov) {
    SaveOptions o;
    o.provenance = std::move(prov);
    return o;
}

/// Layer list "all", "none" or comma-separated indices.
std::vector<std::size_t> parse_layers(const std::string& text, std::size_t n_layers) {
    std::vector<std::size_t> out;
    if (text == "all") {
        return first_to_last_order(n_layers);
    }
    if (text == "none" || text.empty()) {
        return out;
    }
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        try {
            std::size_t used = 0;
            const unsigned long v = std::stoul(item, &used);
            if (used != item.size()) {
                throw std::invalid_argument(item);
            }
            out.push_back(v);
        } catch (const std::logic_error&) {
            throw ConfigError("bad layer index '" + item + "'");
        }
    }
    return out;
}

// --- subcommands ---------------------------------------------------------

int cmd_gen_toy(const Common& cm, const std::string& out) {
    const RunConfig c = load_config(cm);
    const std::uint64_t seed = require_seed(c);
    c.dims.validate();
    const StageSeeds s = derive_seeds(seed);
    const Model m = gen_toy(c.dims, c.layer_config, s.model, c.causal, c.spectral_decay);
    save_checkpoint(m, out, save_opts(provenance(c, {{"spectral_decay", c.spectral_decay}})));
    std::cout << "wrote " << out << " (" << fs::file_size(out) << " bytes, sha256 " << file_sha256(out) << ")\n";
    return 0;
}

int cmd_train_toy(const Common& cm, const std::string& in, const std::string& out, ToyTrainConfig t) {
    const RunConfig c = load_config(cm);
    t.seed = derive_seeds(require_seed(c)).train;
    const Model init = load_model(in);
    const ToyTrainResult r = train_toy(init, t);
    Json prov = provenance(c, {{"task", to_string(t.task)},
                               {"steps", r.steps_run},
                               {"lr", t.lr},
                               {"accuracy", r.accuracy},
                               {"source_hash", file_sha256(in)}});
    save_checkpoint(r.model, out, save_opts(prov));
    std::cout << "steps " << r.steps_run << ", final loss " << (r.loss.empty() ? 0.0 : r.loss.back())
              << ", held-out token accuracy " << r.accuracy << "\n";
    return 0;
}

int cmd_capture(const Common& cm, const std::string& model_path, const std::string& out_dir, std::string dist_name,
                std::size_t samples, std::optional<std::size_t> layer) {
    RunConfig c = load_config(cm);
    const std::uint64_t seed = derive_seeds(require_seed(c)).capture;
    const Model m = load_model(model_path);
    const ToyDistribution dist = distribution_by_name(dist_name, m.dims);
    const auto inputs = sample_sequences(dist, samples, seed);
    const std::string hash = file_sha256(model_path);
    fs::create_directories(out_dir);
    std::vector<HiddenStatePairSet> sets;
    if (layer) {
        sets.push_back(capture_hidden_states(m, inputs, *layer));
    } else {
        sets = capture_all_hidden_states(m, inputs);
    }
    for (auto& s : sets) {
        s.source_hash = hash;
        s.distribution = dist.name;
        const fs::path p = fs::path(out_dir) / ("layer" + std::to_string(s.layer_index) + ".adpt");
        save_pairs(s, p, save_opts(provenance(c)));
        std::cout << "wrote " << p.string() << " (" << s.pairs.size() << " pairs)\n";
    }
    return 0;
}

CompressionPlan plan_for(const RunConfig& c, const std::string& plan_path, const ModelDims& dims) {
    if (!plan_path.empty()) {
        const Json r = load_report(plan_path);
        if (!r.contains("plan")) {
            throw ConfigError(plan_path + " holds no plan");
        }
        CompressionPlan p = compression_plan_from_json(r["plan"]);
        p.validate(dims, false);
        return p;
    }
    return resolve_plan(c, dims);
}

ModelDims dims_for(const RunConfig& c, const std::string& model_path) {
    return model_path.empty() ? c.dims : load_model(model_path).dims;
}

int cmd_plan(const Common& cm, const std::string& model_path, const std::string& out) {
    const RunConfig c = load_config(cm);
    const ModelDims dims = dims_for(c, model_path);
    const CompressionPlan p = resolve_plan(c, dims);
    const SizeReport acc = accounting(dims, p, c.baseline_bits);
    if (c.target) {
        const TargetRange range = feasible_targets(dims, c.attn_ratio);
        std::cout << "feasible targets [" << range.lo << ", " << range.hi << "]\n";
    }
    for (std::size_t j = 0; j < p.layers.size(); ++j) {
        std::cout << "layer " << j << ": ";
        if (p.layers[j].ranks) {
            const RankPlan& r = *p.layers[j].ranks;
            std::cout << "r_a=" << r.attn_rank << " l_a=" << r.attn_lora << " r_f=" << r.ff_rank
                      << " l_f=" << r.ff_lora << (p.layers[j].quantize ? " int8" : "") << "\n";
        } else {
            std::cout << "original\n";
        }
    }
    std::cout << "retained fraction " << acc.retained_fraction << " (attention " << acc.attn_retained
              << ", feed-forward " << acc.ff_retained << "), byte fraction " << acc.byte_fraction << "\n";
    if (!out.empty()) {
        save_report({{"kind", "plan"}, {"plan", to_json(p)}, {"accounting", to_json(acc)},
                     {"provenance", provenance(c)}},
                    out);
    }
    return 0;
}

int cmd_compress(const Common& cm, const std::string& model_path, const std::string& plan_path,
                 const std::string& out) {
    const RunConfig c = load_config(cm);
    const std::uint64_t seed = derive_seeds(require_seed(c)).train;
    const Model m = load_model(model_path);
    const CompressionPlan p = plan_for(c, plan_path, m.dims);
    MixedModel mm = make_mixed(m);
    mm.source_hash = file_sha256(model_path);
    mm.seed = seed;
    for (std::size_t j = 0; j < p.layers.size(); ++j) {
        if (p.layers[j].ranks) {
            CompressedLayerParams l =
                init_for_mode(m.layers[j], m.dims, m.config, *p.layers[j].ranks, c.train.mode, layer_seed(seed, j));
            mm.compressed[j] = p.layers[j].quantize ? quantize_layer(l) : std::move(l);
            mm.active[j] = SlotKind::Compressed;
        }
    }
    save_checkpoint(mm, out, save_opts(provenance(c, {{"plan", to_json(p)}})));
    std::cout << "wrote " << out << ", " << mm.active_compressed() << " compressed layers, retained fraction "
              << accounting(mm, c.baseline_bits).retained_fraction << "\n";
    return 0;
}

std::vector<HiddenStatePairSet> load_pair_dir(const std::string& dir, std::size_t n_layers,
                                              const CompressionPlan& p) {
    std::vector<HiddenStatePairSet> out(n_layers);
    for (std::size_t j = 0; j < n_layers; ++j) {
        out[j].layer_index = j;
        if (p.layers[j].ranks) {
            out[j] = load_pairs(fs::path(dir) / ("layer" + std::to_string(j) + ".adpt"));
        }
    }
    return out;
}

int cmd_finetune(const Common& cm, const std::string& model_path, const std::string& pairs_dir,
                 const std::string& plan_path, const std::string& out) {
    const RunConfig c = load_config(cm);
    TrainConfig tc = c.train;
    tc.seed = derive_seeds(require_seed(c)).train;
    const Model m = load_model(model_path);
    const CompressionPlan p = plan_for(c, plan_path, m.dims);
    const std::string hash = file_sha256(model_path);
    const auto pairs = load_pair_dir(pairs_dir, m.layers.size(), p);
    for (std::size_t j = 0; j < pairs.size(); ++j) {
        if (p.layers[j].ranks && pairs[j].source_hash != hash) {
            throw InputError("pairs for layer " + std::to_string(j) + " were captured from a different model");
        }
    }
    LayerwiseOptions opts;
    opts.workers = c.workers;
    LayerwiseResult r = finetune_all_layers(m, p, pairs, tc, opts);
    r.model.source_hash = hash;
    Json layers = Json::array();
    for (std::size_t j = 0; j < r.training.size(); ++j) {
        if (!r.training[j]) {
            continue;
        }
        const TrainResult& t = *r.training[j];
        layers.push_back({{"layer", j},
                          {"init_objective", t.initial_loss},
                          {"final_objective", t.best_loss},
                          {"best_epoch", t.best_epoch},
                          {"history", t.history}});
        std::cout << "layer " << j << ": objective " << t.initial_loss << " -> " << t.best_loss << " (best epoch "
                  << t.best_epoch << ")\n";
    }
    save_checkpoint(r.model, out, save_opts(provenance(c, {{"plan", to_json(p)}, {"layers", layers}})));
    return 0;
}

int cmd_quantize(const std::string& in, const std::string& out) {
    MixedModel mm = load_mixed(in);
    std::size_t n = 0;
    for (auto& slot : mm.compressed) {
        if (slot && !slot->quantized) {
            slot = quantize_layer(*slot);
            ++n;
        }
    }
    save_checkpoint(mm, out, save_opts({{"quantized_from", file_sha256(in)}}));
    std::cout << "quantized " << n << " layers; byte fraction " << accounting(mm).byte_fraction << "\n";
    return 0;
}

int cmd_assemble(const std::string& in, const std::string& layers, const std::string& out) {
    const MixedModel mm = load_mixed(in);
    const auto chosen = parse_layers(layers, mm.base.layers.size());
    const MixedModel r = with_compressed(mm, chosen);
    save_checkpoint(r, out, save_opts({{"assembled_from", file_sha256(in)}, {"layers", chosen}}));
    const SizeReport acc = accounting(r);
    std::cout << r.active_compressed() << " compressed layers, retained fraction " << acc.retained_fraction
              << ", byte fraction " << acc.byte_fraction << "\n";
    return 0;
}

int cmd_eval(const Common& cm, const std::string& reference_path, const std::string& model_path, std::string task,
             const std::string& out) {
    const RunConfig c = load_config(cm);
    const StageSeeds s = derive_seeds(require_seed(c));
    const Model reference = load_model(reference_path);
    const MixedModel mm = load_mixed(model_path);
    if (!(mm.base == reference)) {
        throw InputError(model_path + " was not built from " + reference_path);
    }
    std::optional<ToyTask> t = task.empty() ? checkpoint_task(reference_path) : std::optional(parse_toy_task(task));
    std::vector<EvalSet> sets;
    sets.push_back(make_eval_set(reference, narrow_distribution(reference.dims), c.eval_samples, s.eval));
    sets.push_back(make_eval_set(reference, broad_distribution(reference.dims), c.eval_samples, layer_seed(s.eval, 1)));
    Json r = {{"kind", "eval"},
              {"provenance", provenance(c, {{"source_hash", file_sha256(reference_path)},
                                            {"model_hash", file_sha256(model_path)}})},
              {"model", evaluate(reference, mm, sets, t, c.baseline_bits)}};
    print_report(r, std::cout);
    if (!out.empty()) {
        save_report(r, out);
    }
    return 0;
}

int cmd_report(const std::string& in, bool json) {
    const Json r = load_report(in);
    if (json) {
        std::cout << r.dump(2) << "\n";
    } else {
        print_report(r, std::cout);
    }
    return 0;
}

int exit_code(const Error& e) { return static_cast<int>(e.category()); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adaptwin: layer-wise low-rank compression of toy transformers"};
    app.require_subcommand(1);

    Common common;
    std::string in, out, model, plan, pairs_dir, reference, layers, task, distribution = "narrow";
    std::size_t samples = 200;
    std::optional<std::size_t> layer;
    bool as_json = false;
    ToyTrainConfig toy;
    std::string toy_task = "copy";

    auto* gen = app.add_subcommand("gen-toy", "Generate a random toy transformer");
    add_common(gen, common);
    gen->add_option("-o,--out", out, "Checkpoint path")->required();

    auto* train = app.add_subcommand("train-toy", "Train a toy model end to end on copy or reverse");
    add_common(train, common);
    train->add_option("-i,--in", in, "Initial checkpoint")->required()->check(CLI::ExistingFile);
    train->add_option("-o,--out", out, "Trained checkpoint")->required();
    train->add_option("--task", toy_task, "copy or reverse");
    train->add_option("--steps", toy.steps, "Optimizer steps");
    train->add_option("--batch", toy.batch_size, "Sequences per step");
    train->add_option("--toy-lr", toy.lr, "Learning rate");
    train->add_option("--eval-count", toy.eval_count, "Held-out sequences for accuracy");

    auto* capture = app.add_subcommand("capture", "Record per-layer hidden-state pairs");
    add_common(capture, common);
    capture->add_option("-m,--model", model, "Source checkpoint")->required()->check(CLI::ExistingFile);
    capture->add_option("-o,--out-dir", out, "Directory for layer{j}.adpt")->required();
    capture->add_option("--distribution", distribution, "narrow or broad");
    capture->add_option("--samples", samples, "Number of input sequences");
    capture->add_option("--layer", layer, "Capture a single layer");

    auto* planc = app.add_subcommand("plan", "Compute ranks and accounting for a target");
    add_common(planc, common);
    planc->add_option("-m,--model", model, "Take dims from this checkpoint")->check(CLI::ExistingFile);
    planc->add_option("-o,--out", out, "Save the plan as a report file");

    auto* comp = app.add_subcommand("compress", "SVD-initialize compressed layers without training");
    add_common(comp, common);
    comp->add_option("-m,--model", model, "Source checkpoint")->required()->check(CLI::ExistingFile);
    comp->add_option("-p,--plan", plan, "Plan file from the plan command")->check(CLI::ExistingFile);
    comp->add_option("-o,--out", out, "Mixed checkpoint")->required();

    auto* ft = app.add_subcommand("finetune", "Compress and fine-tune every planned layer");
    add_common(ft, common);
    ft->add_option("-m,--model", model, "Source checkpoint")->required()->check(CLI::ExistingFile);
    ft->add_option("--pairs", pairs_dir, "Directory written by capture")->required()->check(CLI::ExistingDirectory);
    ft->add_option("-p,--plan", plan, "Plan file from the plan command")->check(CLI::ExistingFile);
    ft->add_option("-o,--out", out, "Mixed checkpoint")->required();

    auto* quant = app.add_subcommand("quantize", "Post-training int8 quantization of compressed slots");
    quant->add_option("-i,--in", in, "Mixed checkpoint")->required()->check(CLI::ExistingFile);
    quant->add_option("-o,--out", out, "Output checkpoint")->required();

    auto* asmb = app.add_subcommand("assemble", "Choose which layers run compressed");
    asmb->add_option("-i,--in", in, "Mixed checkpoint")->required()->check(CLI::ExistingFile);
    asmb->add_option("--layers", layers, "all, none or comma-separated indices")->required();
    asmb->add_option("-o,--out", out, "Output checkpoint")->required();

    auto* ev = app.add_subcommand("eval", "Divergence, agreement and token error rate against the source");
    add_common(ev, common);
    ev->add_option("-r,--reference", reference, "Source checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("-m,--model", model, "Mixed checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--task", task, "copy or reverse (default: read from the source header)");
    ev->add_option("-o,--out", out, "Save the report");

    auto* sw = app.add_subcommand("sweep", "Successive-layer and rank sweeps");
    add_common(sw, common);

    auto* rep = app.add_subcommand("report", "Print a saved report");
    rep->add_option("-i,--in", in, "Report file")->required()->check(CLI::ExistingFile);
    rep->add_flag("--json", as_json, "Print the raw JSON");

    auto* pipe = app.add_subcommand("pipeline", "capture, plan, compress, finetune, assemble and eval");
    add_common(pipe, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return static_cast<int>(ErrorCategory::Config);
    }

    try {
        if (*gen) {
            return cmd_gen_toy(common, out);
        }
        if (*train) {
            toy.task = parse_toy_task(toy_task);
            return cmd_train_toy(common, in, out, toy);
        }
        if (*capture) {
            return cmd_capture(common, model, out, distribution, samples, layer);
        }
        if (*planc) {
            return cmd_plan(common, model, out);
        }
        if (*comp) {
            return cmd_compress(common, model, plan, out);
        }
        if (*ft) {
            return cmd_finetune(common, model, pairs_dir, plan, out);
        }
        if (*quant) {
            return cmd_quantize(in, out);
        }
        if (*asmb) {
            return cmd_assemble(in, layers, out);
        }
        if (*ev) {
            return cmd_eval(common, reference, model, task, out);
        }
        if (*sw) {
            const RunConfig c = load_config(common);
            require_seed(c);
            run_sweep(c, &std::cout);
            return 0;
        }
        if (*rep) {
            return cmd_report(in, as_json);
        }
        if (*pipe) {
            const RunConfig c = load_config(common);
            require_seed(c);
            run_pipeline(c, &std::cout);
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error [" << category_name(e.category()) << "]: " << e.what() << "\n";
        return exit_code(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
