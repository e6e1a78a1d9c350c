// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/assemble.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "adaptwin/errors.hpp"
#include "adaptwin/linalg.hpp"
#include "dense_layer.hpp"
#include "parallel.hpp"

namespace adaptwin {

std::string to_string(SlotKind k) { return k == SlotKind::Original ? "original" : "compressed"; }

void MixedModel::validate() const {
    base.validate();
    const std::size_t L = base.layers.size();
    if (compressed.size() != L || active.size() != L) {
        throw AssemblyError("mixed model has " + std::to_string(compressed.size()) + " compressed slots and " +
                            std::to_string(active.size()) + " selectors for " + std::to_string(L) + " layers");
    }
    for (std::size_t j = 0; j < L; ++j) {
        if (compressed[j]) {
            compressed[j]->validate(base.dims, base.config);
        } else if (active[j] == SlotKind::Compressed) {
            throw AssemblyError("layer " + std::to_string(j) + " selects a compressed slot that does not exist");
        }
    }
}

std::size_t MixedModel::active_compressed() const noexcept {
    return static_cast<std::size_t>(std::count(active.begin(), active.end(), SlotKind::Compressed));
}

MixedModel make_mixed(Model base) {
    MixedModel m;
    const std::size_t L = base.layers.size();
    m.base = std::move(base);
    m.compressed.resize(L);
    m.active.assign(L, SlotKind::Original);
    return m;
}

MixedModel swap(const MixedModel& m, std::size_t layer_index, SlotKind kind) {
    if (layer_index >= m.active.size()) {
        throw AssemblyError("layer " + std::to_string(layer_index) + " out of range for " +
                            std::to_string(m.active.size()) + " layers");
    }
    if (kind == SlotKind::Compressed && !m.compressed[layer_index]) {
        throw AssemblyError("layer " + std::to_string(layer_index) + " has no compressed slot");
    }
    MixedModel out = m;
    out.active[layer_index] = kind;
    return out;
}

MixedModel with_compressed(const MixedModel& m, std::span<const std::size_t> layers) {
    MixedModel out = m;
    std::fill(out.active.begin(), out.active.end(), SlotKind::Original);
    for (std::size_t j : layers) {
        out = swap(out, j, SlotKind::Compressed);
    }
    return out;
}

namespace {

std::vector<detail::DenseLayer> densify_all(const MixedModel& m) {
    std::vector<detail::DenseLayer> dense;
    dense.reserve(m.active.size());
    for (std::size_t j = 0; j < m.active.size(); ++j) {
        if (m.active[j] == SlotKind::Compressed) {
            dense.push_back(detail::densify(*m.compressed[j], m.base.dims, m.base.config));
        } else {
            dense.push_back(detail::densify(m.base.layers[j], m.base.dims, m.base.config));
        }
    }
    return dense;
}

Matrix run(const MixedModel& m, const std::vector<detail::DenseLayer>& dense, std::span<const int> tokens,
           std::vector<Matrix>* states) {
    Matrix x = embed(m.base, tokens);
    if (states) {
        states->push_back(x);
    }
    for (std::size_t j = 0; j < dense.size(); ++j) {
        ForwardOptions opts{m.base.causal, nullptr, static_cast<int>(j)};
        x = detail::dense_forward(dense[j], x, opts, nullptr, nullptr);
        if (states) {
            states->push_back(x);
        }
    }
    return x;
}

}  // namespace

Matrix mixed_forward(const MixedModel& m, std::span<const int> tokens) {
    m.validate();
    return readout_logits(m.base, run(m, densify_all(m), tokens, nullptr));
}

std::vector<Matrix> mixed_hidden_states(const MixedModel& m, std::span<const int> tokens) {
    m.validate();
    std::vector<Matrix> states;
    run(m, densify_all(m), tokens, &states);
    return states;
}

Divergence logit_divergence(const Model& reference, const MixedModel& m, std::span<const TokenSeq> inputs) {
    m.validate();
    const auto dense = densify_all(m);
    double diff2 = 0.0, ref2 = 0.0;
    std::size_t agree = 0, total = 0;
    for (const auto& seq : inputs) {
        const Matrix ref = model_forward(reference, seq);
        const Matrix got = readout_logits(m.base, run(m, dense, seq, nullptr));
        for (std::size_t i = 0; i < ref.rows(); ++i) {
            std::size_t a = 0, b = 0;
            for (std::size_t v = 0; v < ref.cols(); ++v) {
                const double dv = got(i, v) - ref(i, v);
                diff2 += dv * dv;
                ref2 += ref(i, v) * ref(i, v);
                if (ref(i, v) > ref(i, a)) a = v;
                if (got(i, v) > got(i, b)) b = v;
            }
            agree += a == b ? 1 : 0;
            ++total;
        }
    }
    Divergence d;
    d.relative = ref2 > 0 ? std::sqrt(diff2) / std::sqrt(ref2) : std::sqrt(diff2);
    d.agreement = total > 0 ? static_cast<double>(agree) / static_cast<double>(total) : 1.0;
    return d;
}

double slot_objective(const MixedModel& m, std::size_t layer_index, const HiddenStatePairSet& pairs) {
    m.validate();
    if (layer_index >= m.active.size()) {
        throw AssemblyError("layer " + std::to_string(layer_index) + " out of range");
    }
    pairs.validate();
    const detail::DenseLayer dense =
        m.active[layer_index] == SlotKind::Compressed
            ? detail::densify(*m.compressed[layer_index], m.base.dims, m.base.config)
            : detail::densify(m.base.layers[layer_index], m.base.dims, m.base.config);
    double total = 0.0;
    for (const auto& p : pairs.pairs) {
        ForwardOptions opts{pairs.causal, nullptr, static_cast<int>(layer_index)};
        const Matrix y = detail::dense_forward(dense, p.input, opts, nullptr, nullptr);
        const double e = fro_norm(y - p.output);
        total += e * e;
    }
    return total / static_cast<double>(pairs.pairs.size());
}

SizeReport accounting(const MixedModel& m, unsigned baseline_bits) {
    std::vector<LayerSize> layers;
    for (std::size_t j = 0; j < m.active.size(); ++j) {
        LayerPlan lp;
        if (m.active[j] == SlotKind::Compressed && m.compressed[j]) {
            lp.ranks = m.compressed[j]->ranks;
            lp.quantize = m.compressed[j]->quantized;
        }
        layers.push_back(layer_size(m.base.dims, lp, baseline_bits));
    }
    return summarize(std::move(layers), baseline_bits);
}

std::vector<SweepPoint> sweep(const MixedModel& m, std::span<const std::size_t> order,
                              std::span<const TokenSeq> inputs, unsigned baseline_bits) {
    for (std::size_t j : order) {
        if (j >= m.compressed.size() || !m.compressed[j]) {
            throw AssemblyError("sweep needs a compressed slot for layer " + std::to_string(j));
        }
    }
    std::vector<SweepPoint> points(order.size() + 1);
    // Points are independent; each writes only its own slot.
    detail::parallel_for(points.size(), [&](std::size_t k) {
        const auto prefix = order.first(k);
        const MixedModel mk = with_compressed(m, prefix);
        SweepPoint& p = points[k];
        p.compressed_layers = prefix.size();
        p.layers.assign(prefix.begin(), prefix.end());
        const SizeReport rep = accounting(mk, baseline_bits);
        p.retained_fraction = rep.retained_fraction;
        p.byte_fraction = rep.byte_fraction;
        p.divergence = logit_divergence(m.base, mk, inputs);
    });
    return points;
}

std::vector<std::size_t> first_to_last_order(std::size_t n_layers) {
    std::vector<std::size_t> order(n_layers);
    std::iota(order.begin(), order.end(), std::size_t{0});
    return order;
}

std::vector<std::size_t> greedy_order(std::span<const double> layer_objectives) {
    std::vector<std::size_t> order = first_to_last_order(layer_objectives.size());
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return layer_objectives[a] > layer_objectives[b];
    });
    return order;
}

}  // namespace adaptwin
