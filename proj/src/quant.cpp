// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/quant.hpp"

#include <algorithm>
#include <cmath>

#include "adaptwin/compress.hpp"
#include "adaptwin/errors.hpp"

namespace adaptwin {

std::size_t QuantizedTensor::bytes() const noexcept { return int8_tensor_bytes(rows, cols); }

QuantizedTensor quantize(const Matrix& m) {
    if (!m.all_finite()) {
        throw NumericalError("cannot quantize a tensor with non-finite entries");
    }
    QuantizedTensor q;
    q.rows = m.rows();
    q.cols = m.cols();
    q.codes.resize(m.size());
    q.scales.resize(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        double absmax = 0.0;
        for (double v : m.row(r)) {
            absmax = std::max(absmax, std::abs(v));
        }
        const float scale = absmax > 0.0 ? static_cast<float>(absmax / 127.0) : 1.0f;
        q.scales[r] = scale;
        const double s = scale;
        for (std::size_t c = 0; c < m.cols(); ++c) {
            // nearbyint follows the default round-half-to-even mode.
            const double code = std::clamp(std::nearbyint(m(r, c) / s), -127.0, 127.0);
            q.codes[r * m.cols() + c] = static_cast<std::int8_t>(code);
        }
    }
    return q;
}

Matrix dequantize(const QuantizedTensor& q) {
    Matrix m(q.rows, q.cols);
    for (std::size_t r = 0; r < q.rows; ++r) {
        const double s = q.scales[r];
        for (std::size_t c = 0; c < q.cols; ++c) {
            m(r, c) = static_cast<double>(q.codes[r * q.cols + c]) * s;
        }
    }
    return m;
}

Matrix fake_quantize(const Matrix& m) { return dequantize(quantize(m)); }

Matrix ste_mask(const Matrix& m) {
    const QuantizedTensor q = quantize(m);
    Matrix mask(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const double limit = 127.5 * static_cast<double>(q.scales[r]);
        for (std::size_t c = 0; c < m.cols(); ++c) {
            mask(r, c) = std::abs(m(r, c)) <= limit ? 1.0 : 0.0;
        }
    }
    return mask;
}

namespace {

template <class F>
void for_each_factor(CompressedLayerParams& p, F&& f) {
    for (Matrix* m : {&p.w_q, &p.w_k, &p.w_v, &p.w_o_t, &p.ff_1.u, &p.ff_1.v, &p.ff_1.a, &p.ff_1.b, &p.ff_2.u,
                      &p.ff_2.v, &p.ff_2.a, &p.ff_2.b}) {
        f(*m);
    }
}

}  // namespace

CompressedLayerParams quantize_layer(const CompressedLayerParams& p) {
    CompressedLayerParams q = p;
    for_each_factor(q, [](Matrix& m) { m = fake_quantize(m); });
    q.quantized = true;
    return q;
}

ForwardTransform int8_transform() {
    ForwardTransform t;
    t.apply = [](const CompressedLayerParams& master) { return quantize_layer(master); };
    t.backward = [](const CompressedLayerParams& master, CompressedLayerParams& grads) {
        CompressedLayerParams m = master;
        std::vector<Matrix*> src, dst;
        for_each_factor(m, [&](Matrix& x) { src.push_back(&x); });
        for_each_factor(grads, [&](Matrix& x) { dst.push_back(&x); });
        for (std::size_t k = 0; k < src.size(); ++k) {
            const Matrix mask = ste_mask(*src[k]);
            for (std::size_t i = 0; i < mask.size(); ++i) {
                dst[k]->values()[i] *= mask.values()[i];
            }
        }
    };
    return t;
}

TrainResult finetune_layer_quantized(const CompressedLayerParams& init, const HiddenStatePairSet& pairs,
                                     const LayerConfig& cfg, const TrainConfig& train, QuantLevel level) {
    if (level == QuantLevel::None) {
        return finetune_layer(init, pairs, cfg, train);
    }
    const ForwardTransform t = int8_transform();
    TrainResult r = finetune_layer(init, pairs, cfg, train, &t);
    r.params.quantized = true;
    return r;
}

TrainResult post_training_quantize(const CompressedLayerParams& init, const HiddenStatePairSet& pairs,
                                   const LayerConfig& cfg, const TrainConfig& train) {
    TrainResult r = finetune_layer(init, pairs, cfg, train);
    r.params = quantize_layer(r.params);
    r.best_loss = layer_objective(r.params, pairs, cfg);
    return r;
}

}  // namespace adaptwin
