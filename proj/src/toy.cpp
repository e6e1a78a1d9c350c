// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/toy.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "adaptwin/errors.hpp"
#include "adaptwin/linalg.hpp"
#include "adaptwin/optim.hpp"
#include "parallel.hpp"

namespace adaptwin {

void ToyDistribution::validate(std::size_t vocab) const {
    if (alphabet == 0 || alphabet > vocab) {
        throw ConfigError("distribution '" + name + "' alphabet " + std::to_string(alphabet) + " outside 1.." +
                          std::to_string(vocab));
    }
    if (min_len == 0 || min_len > max_len) {
        throw ConfigError("distribution '" + name + "' has an empty length range");
    }
}

ToyDistribution narrow_distribution(const ModelDims& dims) {
    return {"narrow", std::max<std::size_t>(2, dims.vocab / 4), 12, 12};
}

ToyDistribution broad_distribution(const ModelDims& dims) { return {"broad", dims.vocab, 4, 20}; }

std::vector<TokenSeq> sample_sequences(const ToyDistribution& dist, std::size_t count, std::uint64_t seed) {
    if (dist.alphabet == 0 || dist.min_len == 0 || dist.min_len > dist.max_len) {
        throw ConfigError("invalid distribution '" + dist.name + "'");
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> len(dist.min_len, dist.max_len);
    std::uniform_int_distribution<int> tok(0, static_cast<int>(dist.alphabet) - 1);
    std::vector<TokenSeq> out(count);
    for (auto& s : out) {
        s.resize(len(rng));
        for (auto& t : s) {
            t = tok(rng);
        }
    }
    return out;
}

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double std) {
    std::normal_distribution<double> nd(0.0, std);
    Matrix m(rows, cols);
    for (auto& v : m.values()) {
        v = nd(rng);
    }
    return m;
}

Matrix decay_spectrum(const Matrix& w, double alpha) {
    SvdResult s = svd(w);
    double have = 0.0, want = 0.0;
    for (std::size_t i = 0; i < s.sigma.size(); ++i) {
        const double t = std::pow(static_cast<double>(i + 1), -alpha);
        have += s.sigma[i] * s.sigma[i];
        want += t * t;
    }
    const double c = std::sqrt(have / want);
    for (std::size_t i = 0; i < s.sigma.size(); ++i) {
        s.sigma[i] = c * std::pow(static_cast<double>(i + 1), -alpha);
    }
    return reconstruct(s);
}

// Row blocks of height `block` are reshaped independently.
Matrix decay_blocks(const Matrix& w, std::size_t block, double alpha) {
    std::vector<Matrix> parts;
    for (std::size_t r0 = 0; r0 < w.rows(); r0 += block) {
        parts.push_back(decay_spectrum(slice_rows(w, r0, r0 + block), alpha));
    }
    return vstack(parts);
}

}  // namespace

Model gen_toy(const ModelDims& dims, const LayerConfig& cfg, std::uint64_t seed, bool causal, double spectral_decay) {
    dims.validate();
    if (!(spectral_decay >= 0.0) || !std::isfinite(spectral_decay)) {
        throw ConfigError("spectral decay must be a finite nonnegative number");
    }
    std::mt19937_64 rng(seed);
    const std::size_t d = dims.d_model;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double sf = 1.0 / std::sqrt(static_cast<double>(dims.d_ff));
    Model m;
    m.dims = dims;
    m.config = cfg;
    m.causal = causal;
    m.token_embedding = round_to_f32(gaussian(dims.vocab, d, rng, 1.0));
    m.readout = round_to_f32(gaussian(dims.vocab, d, rng, sd));
    m.readout_bias = Matrix(1, dims.vocab);
    for (std::size_t j = 0; j < dims.n_layers; ++j) {
        LayerParams p;
        p.w_q = gaussian(d, d, rng, sd);
        p.w_k = gaussian(d, d, rng, sd);
        p.w_v = gaussian(d, d, rng, sd);
        p.w_o = gaussian(d, d, rng, sd);
        p.w_1 = gaussian(dims.d_ff, d, rng, sd);
        p.w_2 = gaussian(d, dims.d_ff, rng, sf);
        p.b_q = gaussian(1, d, rng, 0.02);
        p.b_v = gaussian(1, d, rng, 0.02);
        p.b_o = gaussian(1, d, rng, 0.02);
        p.b_1 = gaussian(1, dims.d_ff, rng, 0.02);
        p.b_2 = gaussian(1, d, rng, 0.02);
        p.ln_gain = Matrix(1, d, 1.0);
        p.ln_bias = Matrix(1, d);
        if (cfg.ff_residual_pre_ln) {
            p.ln2_gain = Matrix(1, d, 1.0);
            p.ln2_bias = Matrix(1, d);
        }
        if (spectral_decay > 0.0) {
            const std::size_t dh = dims.head_dim;
            p.w_q = decay_blocks(p.w_q, dh, spectral_decay);
            p.w_k = decay_blocks(p.w_k, dh, spectral_decay);
            p.w_v = decay_blocks(p.w_v, dh, spectral_decay);
            p.w_o = transpose(decay_blocks(transpose(p.w_o), dh, spectral_decay));
            p.w_1 = decay_spectrum(p.w_1, spectral_decay);
            p.w_2 = decay_spectrum(p.w_2, spectral_decay);
        }
        for (auto& r : parameters(p)) {
            *r.tensor = round_to_f32(*r.tensor);
        }
        m.layers.push_back(std::move(p));
    }
    return m;
}

std::string to_string(ToyTask t) { return t == ToyTask::Copy ? "copy" : "reverse"; }

ToyTask parse_toy_task(const std::string& s) {
    if (s == "copy") {
        return ToyTask::Copy;
    }
    if (s == "reverse") {
        return ToyTask::Reverse;
    }
    throw ConfigError("unknown toy task '" + s + "' (expected copy or reverse)");
}

TokenSeq task_target(ToyTask task, const TokenSeq& input) {
    TokenSeq t = input;
    if (task == ToyTask::Reverse) {
        std::reverse(t.begin(), t.end());
    }
    return t;
}

TokenSeq predict(const Model& m, const TokenSeq& input) {
    const Matrix logits = model_forward(m, input);
    TokenSeq out(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto row = logits.row(i);
        out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) {
        prev[j] = j;
    }
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double token_accuracy(const Model& m, ToyTask task, std::span<const TokenSeq> inputs) {
    std::size_t hit = 0, total = 0;
    for (const auto& s : inputs) {
        const TokenSeq p = predict(m, s);
        const TokenSeq t = task_target(task, s);
        for (std::size_t i = 0; i < t.size(); ++i) {
            hit += p[i] == t[i] ? 1 : 0;
        }
        total += t.size();
    }
    return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

double token_error_rate(const Model& m, ToyTask task, std::span<const TokenSeq> inputs) {
    std::size_t errors = 0, total = 0;
    for (const auto& s : inputs) {
        const TokenSeq t = task_target(task, s);
        errors += edit_distance(predict(m, s), t);
        total += t.size();
    }
    return total ? static_cast<double>(errors) / static_cast<double>(total) : 0.0;
}

void ToyTrainConfig::validate() const {
    if (batch_size == 0) {
        throw ConfigError("toy training batch size must be positive");
    }
    if (!(lr > 0.0)) {
        throw ConfigError("toy training learning rate must be positive");
    }
}

std::vector<ParamRef> parameters(Model& m) {
    std::vector<ParamRef> out;
    out.push_back(ParamRef{"token_embedding", &m.token_embedding, TensorClass::Dense, 0, 0});
    out.push_back(ParamRef{"readout", &m.readout, TensorClass::Dense, 0, 0});
    out.push_back(ParamRef{"readout_bias", &m.readout_bias, TensorClass::Bias, 0, 0});
    for (std::size_t j = 0; j < m.layers.size(); ++j) {
        for (auto r : parameters(m.layers[j])) {
            r.name = "layer" + std::to_string(j) + "/" + r.name;
            out.push_back(std::move(r));
        }
    }
    return out;
}

namespace {

// Writes the gradient into a Model-shaped container so parameters() aligns.
Model gradient_model(const Model& like, ModelGradients&& g) {
    Model out;
    out.dims = like.dims;
    out.token_embedding = std::move(g.token_embedding);
    out.readout = std::move(g.readout);
    out.readout_bias = std::move(g.readout_bias);
    out.layers = std::move(g.layers);
    return out;
}

void accumulate(Model& acc, Model& g) {
    auto a = parameters(acc);
    auto b = parameters(g);
    for (std::size_t k = 0; k < a.size(); ++k) {
        *a[k].tensor += *b[k].tensor;
    }
}

}  // namespace

ToyTrainResult train_toy(const Model& init, const ToyTrainConfig& cfg) {
    cfg.validate();
    init.validate();
    ToyTrainResult r;
    r.model = init;
    const ToyDistribution dist = broad_distribution(init.dims);
    std::mt19937_64 rng(cfg.seed);
    auto refs = parameters(r.model);
    Adam adam({cfg.lr, 0.9, 0.999, 1e-8}, refs, [&] {
        RowMask mask;
        for (const auto& ref : refs) {
            mask.emplace_back(ref.tensor->rows(), 1);
        }
        return mask;
    }());
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto batch = sample_sequences(dist, cfg.batch_size, rng());
        std::size_t positions = 0;
        for (const auto& s : batch) {
            positions += s.size();
        }
        const double inv = 1.0 / static_cast<double>(positions);
        std::vector<Model> grads(batch.size());
        std::vector<double> losses(batch.size());
        detail::parallel_for(batch.size(), [&](std::size_t k) {
            const TokenSeq& s = batch[k];
            const TokenSeq target = task_target(cfg.task, s);
            Matrix logits = model_forward(r.model, s);
            double loss = 0.0;
            // Softmax cross-entropy; logits become dL/dlogits in place.
            for (std::size_t i = 0; i < logits.rows(); ++i) {
                auto row = logits.row(i);
                const double mx = *std::max_element(row.begin(), row.end());
                double z = 0.0;
                for (double& v : row) {
                    v = std::exp(v - mx);
                    z += v;
                }
                for (double& v : row) {
                    v /= z;
                }
                loss -= std::log(std::max(row[static_cast<std::size_t>(target[i])], 1e-300));
                row[static_cast<std::size_t>(target[i])] -= 1.0;
                for (double& v : row) {
                    v *= inv;
                }
            }
            losses[k] = loss;
            grads[k] = gradient_model(r.model, model_backward(r.model, s, logits));
        });
        double loss = 0.0;
        for (std::size_t k = 0; k < batch.size(); ++k) {
            loss += losses[k];
            if (k > 0) {
                accumulate(grads[0], grads[k]);
            }
        }
        loss *= inv;
        if (!std::isfinite(loss)) {
            break;
        }
        r.loss.push_back(loss);
        adam.step(refs, parameters(grads[0]));
        r.steps_run = step + 1;
    }
    const auto held_out = sample_sequences(dist, cfg.eval_count, cfg.seed ^ 0x5eedf00dULL);
    r.accuracy = token_accuracy(r.model, cfg.task, held_out);
    return r;
}

}  // namespace adaptwin
