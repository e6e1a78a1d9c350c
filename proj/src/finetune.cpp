// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/finetune.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include "adaptwin/errors.hpp"
#include "adaptwin/linalg.hpp"
#include "adaptwin/quant.hpp"
#include "dense_layer.hpp"
#include "parallel.hpp"

namespace adaptwin {

std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::All: return "all";
        case TrainMode::SpectralOnly: return "spectral-only";
        case TrainMode::Scratch: return "scratch";
        case TrainMode::LoraOnly: return "lora-only";
    }
    return "unknown";
}

TrainMode parse_train_mode(const std::string& s) {
    for (TrainMode m : {TrainMode::All, TrainMode::SpectralOnly, TrainMode::Scratch, TrainMode::LoraOnly}) {
        if (to_string(m) == s) {
            return m;
        }
    }
    throw ConfigError("unknown training mode '" + s + "' (expected all, spectral-only, scratch or lora-only)");
}

void TrainConfig::validate() const {
    if (epochs < 1) {
        throw ConfigError("epochs must be at least 1");
    }
    if (batch_size < 1) {
        throw ConfigError("batch size must be at least 1");
    }
    if (!(lr > 0.0) || !std::isfinite(lr)) {
        throw ConfigError("learning rate must be positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) {
        throw ConfigError("Adam epsilon must be positive");
    }
}

RankPlan mode_plan(const RankPlan& plan, TrainMode mode) {
    switch (mode) {
        case TrainMode::SpectralOnly: return {plan.attn_width(), 0, plan.ff_width(), 0};
        case TrainMode::Scratch: return {0, plan.attn_width(), 0, plan.ff_width()};
        default: return plan;
    }
}

CompressedLayerParams init_for_mode(const LayerParams& original, const ModelDims& dims, const LayerConfig& cfg,
                                    const RankPlan& plan, TrainMode mode, std::uint64_t seed) {
    CompressOptions opts;
    opts.seed = seed;
    opts.init = mode == TrainMode::Scratch ? InitStrategy::Scratch : InitStrategy::Svd;
    return compress_layer(original, dims, cfg, mode_plan(plan, mode), opts);
}

bool is_trainable(TrainMode mode, TensorClass cls) noexcept {
    switch (cls) {
        case TensorClass::Bias:
        case TensorClass::Norm:
        case TensorClass::Lora: return true;
        case TensorClass::Spectral: return mode != TrainMode::LoraOnly;
        case TensorClass::Dense: return false;
    }
    return false;
}

RowMask trainable_rows(CompressedLayerParams& p, TrainMode mode) {
    const auto refs = parameters(p);
    RowMask mask(refs.size());
    for (std::size_t t = 0; t < refs.size(); ++t) {
        const std::size_t rows = refs[t].tensor->rows();
        mask[t].resize(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            mask[t][r] = is_trainable(mode, refs[t].row_class(r)) ? 1 : 0;
        }
    }
    return mask;
}

namespace {

void check_pairs(const HiddenStatePairSet& pairs, const CompressedLayerParams& p) {
    pairs.validate();
    if (p.w_q.cols() != pairs.dims.d_model) {
        throw ShapeError("layer width " + std::to_string(p.w_q.cols()) + " does not match pair width " +
                         std::to_string(pairs.dims.d_model));
    }
}

ForwardOptions pair_options(const HiddenStatePairSet& pairs) {
    return ForwardOptions{pairs.causal, nullptr, static_cast<int>(pairs.layer_index)};
}

double dense_objective(const detail::DenseLayer& dense, const HiddenStatePairSet& pairs, bool parallel) {
    std::vector<double> err(pairs.pairs.size());
    const ForwardOptions opts = pair_options(pairs);
    detail::parallel_for(
        pairs.pairs.size(),
        [&](std::size_t k) {
            const auto& pr = pairs.pairs[k];
            const double e = fro_norm(detail::dense_forward(dense, pr.input, opts, nullptr, nullptr) - pr.output);
            err[k] = e * e;
        },
        parallel);
    double total = 0.0;
    for (double e : err) {
        total += e;
    }
    return total / static_cast<double>(err.size());
}

}  // namespace

double layer_objective(const CompressedLayerParams& p, const HiddenStatePairSet& pairs, const LayerConfig& cfg) {
    check_pairs(pairs, p);
    p.validate(pairs.dims, cfg);
    return dense_objective(detail::densify(p, pairs.dims, cfg), pairs, true);
}

ObjectiveGradient objective_gradient(const CompressedLayerParams& p, const HiddenStatePairSet& pairs,
                                     const LayerConfig& cfg, std::span<const std::size_t> indices, bool parallel) {
    check_pairs(pairs, p);
    p.validate(pairs.dims, cfg);
    std::vector<std::size_t> all;
    if (indices.empty()) {
        all.resize(pairs.pairs.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        indices = all;
    }
    const detail::DenseLayer dense = detail::densify(p, pairs.dims, cfg);
    const ForwardOptions opts = pair_options(pairs);
    const double inv = 1.0 / static_cast<double>(indices.size());
    std::vector<detail::DenseLayer> grads(indices.size());
    std::vector<double> err(indices.size());
    detail::parallel_for(
        indices.size(),
        [&](std::size_t k) {
            const auto& pr = pairs.pairs.at(indices[k]);
            detail::ForwardCache cache;
            Matrix diff = detail::dense_forward(dense, pr.input, opts, &cache, nullptr) - pr.output;
            const double e = fro_norm(diff);
            err[k] = e * e;
            diff *= 2.0 * inv;
            grads[k] = std::move(detail::dense_backward(dense, cache, diff).grads);
        },
        parallel);
    ObjectiveGradient out;
    for (std::size_t k = 1; k < grads.size(); ++k) {
        detail::add_into(grads[0], grads[k]);
    }
    for (double e : err) {
        out.loss += e;
    }
    out.loss *= inv;
    out.grads = detail::pull_back(grads[0], p);
    return out;
}

namespace {

bool all_finite(CompressedLayerParams& g) {
    for (const auto& r : parameters(g)) {
        if (!r.tensor->all_finite()) {
            return false;
        }
    }
    return true;
}

}  // namespace

TrainResult finetune_layer(const CompressedLayerParams& init, const HiddenStatePairSet& pairs,
                           const LayerConfig& cfg, const TrainConfig& train, const ForwardTransform* transform) {
    train.validate();
    check_pairs(pairs, init);
    init.validate(pairs.dims, cfg);
    const bool par = train.parallel_samples;
    auto effective = [&](const CompressedLayerParams& master) {
        return transform && transform->apply ? transform->apply(master) : master;
    };
    auto evaluate = [&](const CompressedLayerParams& master) {
        try {
            return dense_objective(detail::densify(effective(master), pairs.dims, cfg), pairs, par);
        } catch (const NumericalError&) {
            return std::nan("");
        }
    };

    CompressedLayerParams master = init;
    TrainResult r;
    r.initial_loss = evaluate(master);
    if (!std::isfinite(r.initial_loss)) {
        throw TrainingError("layer " + std::to_string(pairs.layer_index) + ": initial objective is not finite");
    }
    r.history.push_back(r.initial_loss);
    r.best_loss = r.initial_loss;
    CompressedLayerParams best = master;

    Adam adam(train.adam(), parameters(master), trainable_rows(master, train.mode));
    std::mt19937_64 rng(train.seed);
    std::vector<std::size_t> order(pairs.pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 1; epoch <= train.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        bool blew_up = false;
        for (std::size_t start = 0; start < order.size() && !blew_up; start += train.batch_size) {
            const std::size_t end = std::min(order.size(), start + train.batch_size);
            const std::span<const std::size_t> batch(order.data() + start, end - start);
            ObjectiveGradient g;
            try {
                g = objective_gradient(effective(master), pairs, cfg, batch, par);
            } catch (const NumericalError&) {
                blew_up = true;
                break;
            }
            if (transform && transform->backward) {
                transform->backward(master, g.grads);
            }
            if (!all_finite(g.grads)) {
                blew_up = true;
                break;
            }
            adam.step(parameters(master), parameters(g.grads));
        }
        const double loss = blew_up ? std::nan("") : evaluate(master);
        if (!std::isfinite(loss)) {
            r.diverged_epoch = epoch;
            if (train.throw_on_divergence) {
                throw TrainingError("layer " + std::to_string(pairs.layer_index) + ": objective diverged in epoch " +
                                    std::to_string(epoch));
            }
            break;
        }
        r.history.push_back(loss);
        if (loss < r.best_loss) {
            r.best_loss = loss;
            r.best_epoch = epoch;
            best = master;
        }
    }
    r.params = effective(best);
    return r;
}

std::optional<double> GradCheckReport::class_error(TensorClass c) const {
    std::optional<double> worst;
    for (const auto& t : tensors) {
        if (t.cls == c) {
            worst = std::max(worst.value_or(0.0), t.rel_error);
        }
    }
    return worst;
}

GradCheckReport grad_check(const CompressedLayerParams& p, const HiddenStatePairSet& pairs, const LayerConfig& cfg,
                           const GradCheckOptions& opts) {
    CompressedLayerParams work = p;
    const auto analytic = objective_gradient(work, pairs, cfg, {}, false);
    CompressedLayerParams grads = analytic.grads;
    const auto refs = parameters(work);
    const auto grefs = parameters(grads);
    const double floor = 1e-6 * (1.0 + std::abs(analytic.loss));

    GradCheckReport rep;
    double g2 = 0.0;
    for (std::size_t t = 0; t < refs.size(); ++t) {
        Matrix& m = *refs[t].tensor;
        const Matrix& ga = *grefs[t].tensor;
        // One accumulator per row class present in this tensor.
        struct Acc {
            double diff2 = 0, a2 = 0, n2 = 0;
            bool used = false;
        };
        Acc acc[5];
        for (std::size_t r = 0; r < m.rows(); ++r) {
            const TensorClass cls = refs[t].row_class(r);
            if (!is_trainable(opts.mode, cls)) {
                continue;
            }
            Acc& a = acc[static_cast<int>(cls)];
            a.used = true;
            for (std::size_t c = 0; c < m.cols(); ++c) {
                const double orig = m(r, c);
                m(r, c) = orig + opts.step;
                const double up = layer_objective(work, pairs, cfg);
                m(r, c) = orig - opts.step;
                const double dn = layer_objective(work, pairs, cfg);
                m(r, c) = orig;
                const double num = (up - dn) / (2.0 * opts.step);
                const double an = ga(r, c);
                a.diff2 += (an - num) * (an - num);
                a.a2 += an * an;
                a.n2 += num * num;
            }
        }
        for (int k = 0; k < 5; ++k) {
            if (!acc[k].used) {
                continue;
            }
            TensorCheck tc;
            tc.cls = static_cast<TensorClass>(k);
            tc.name = refs[t].block ? refs[t].name + "[" + to_string(tc.cls) + "]" : refs[t].name;
            tc.analytic_norm = std::sqrt(acc[k].a2);
            tc.numeric_norm = std::sqrt(acc[k].n2);
            tc.rel_error = std::sqrt(acc[k].diff2) / std::max({tc.analytic_norm, tc.numeric_norm, floor});
            g2 += acc[k].a2;
            rep.max_rel_error = std::max(rep.max_rel_error, tc.rel_error);
            rep.tensors.push_back(std::move(tc));
        }
    }
    rep.grad_norm = std::sqrt(g2);
    rep.passed = rep.max_rel_error < opts.tolerance;
    return rep;
}

LayerwiseResult finetune_all_layers(const Model& model, const CompressionPlan& plan,
                                    std::span<const HiddenStatePairSet> pairs, const TrainConfig& train,
                                    const LayerwiseOptions& opts) {
    model.validate();
    plan.validate(model.dims, false);
    train.validate();
    const std::size_t L = model.layers.size();
    std::vector<std::size_t> jobs;
    for (std::size_t j = 0; j < L; ++j) {
        if (plan.layers[j].ranks) {
            if (j >= pairs.size() || pairs[j].layer_index != j) {
                throw InputError("no captured pairs for layer " + std::to_string(j));
            }
            jobs.push_back(j);
        }
    }

    LayerwiseResult out;
    out.model = make_mixed(model);
    out.model.seed = train.seed;
    out.training.resize(L);
    out.init_objective.resize(L);
    std::vector<std::exception_ptr> errors(L);

    const std::size_t workers = std::max<std::size_t>(1, std::min(opts.workers, jobs.size()));
    auto run_job = [&](std::size_t j) {
        try {
            TrainConfig tc = train;
            tc.seed = layer_seed(train.seed, j);
            tc.parallel_samples = train.parallel_samples && workers == 1;
            const LayerPlan& lp = plan.layers[j];
            CompressedLayerParams init =
                init_for_mode(model.layers[j], model.dims, model.config, *lp.ranks, train.mode, tc.seed);
            if (!opts.train) {
                if (lp.quantize) {
                    init = quantize_layer(init);
                }
                out.init_objective[j] = layer_objective(init, pairs[j], model.config);
                out.model.compressed[j] = std::move(init);
                return;
            }
            TrainResult tr = lp.quantize ? finetune_layer_quantized(init, pairs[j], model.config, tc)
                                         : finetune_layer(init, pairs[j], model.config, tc);
            out.init_objective[j] = tr.initial_loss;
            out.model.compressed[j] = tr.params;
            out.training[j] = std::move(tr);
        } catch (...) {
            errors[j] = std::current_exception();
        }
    };

    if (workers == 1) {
        for (std::size_t j : jobs) {
            run_job(j);
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t k = next++; k < jobs.size(); k = next++) {
                    run_job(jobs[k]);
                }
            });
        }
        for (auto& t : pool) {
            t.join();
        }
    }
    for (std::size_t j = 0; j < L; ++j) {
        if (!errors[j]) {
            continue;
        }
        try {
            std::rethrow_exception(errors[j]);
        } catch (const Error& e) {
            // Keep the category so the CLI still reports the underlying kind of failure.
            throw Error(e.category(), "layer " + std::to_string(j) + ": " + e.what());
        }
    }
    for (std::size_t j : jobs) {
        out.model.active[j] = SlotKind::Compressed;
    }
    return out;
}

LayerwiseResult finetune_all_layers(const Model& model, const CompressionPlan& plan, std::span<const TokenSeq> inputs,
                                    const TrainConfig& train, const LayerwiseOptions& opts) {
    if (plan.compressed_count() == 0) {
        plan.validate(model.dims, false);
        return finetune_all_layers(model, plan, std::span<const HiddenStatePairSet>{}, train, opts);
    }
    const auto pairs = capture_all_hidden_states(model, inputs);
    return finetune_all_layers(model, plan, pairs, train, opts);
}

}  // namespace adaptwin
