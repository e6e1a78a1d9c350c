// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "dense_layer.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "adaptwin/errors.hpp"
#include "adaptwin/kernels.hpp"
#include "adaptwin/linalg.hpp"

namespace adaptwin::detail {

namespace {

void add_row_bias(Matrix& m, const Matrix& bias) {
    if (bias.empty()) {
        return;
    }
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        for (std::size_t j = 0; j < m.cols(); ++j) {
            r[j] += bias(0, j);
        }
    }
}

Matrix colsum(const Matrix& m) {
    Matrix out(1, m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out(0, j) += m(i, j);
        }
    }
    return out;
}

void check_finite(const Matrix& m, const ForwardOptions& opts, const char* step) {
    if (!m.all_finite()) {
        std::string where = opts.layer_index >= 0 ? "layer " + std::to_string(opts.layer_index) : "layer";
        throw NumericalError(where + ": non-finite values after " + step);
    }
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps, Matrix& hat,
                  std::vector<double>& inv) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    hat = Matrix(n, d);
    inv.assign(n, 0.0);
    Matrix y(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = x.row(i);
        double mean = 0.0;
        for (double v : r) {
            mean += v;
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : r) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (r[j] - mean) * is;
            hat(i, j) = h;
            y(i, j) = gain(0, j) * h + bias(0, j);
        }
    }
    return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& hat, const std::vector<double>& inv, const Matrix& gain,
                           Matrix& dgain, Matrix& dbias) {
    const std::size_t n = dy.rows();
    const std::size_t d = dy.cols();
    Matrix dx(n, d);
    std::vector<double> dhat(d);
    for (std::size_t i = 0; i < n; ++i) {
        double mean_dhat = 0.0;
        double mean_dhat_hat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dgain(0, j) += dy(i, j) * hat(i, j);
            dbias(0, j) += dy(i, j);
            dhat[j] = dy(i, j) * gain(0, j);
            mean_dhat += dhat[j];
            mean_dhat_hat += dhat[j] * hat(i, j);
        }
        mean_dhat /= static_cast<double>(d);
        mean_dhat_hat /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            dx(i, j) = inv[i] * (dhat[j] - mean_dhat - hat(i, j) * mean_dhat_hat);
        }
    }
    return dx;
}

double activate(Activation a, double x) {
    if (a == Activation::Relu) {
        return x > 0.0 ? x : 0.0;
    }
    return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
}

double activate_grad(Activation a, double x) {
    if (a == Activation::Relu) {
        return x > 0.0 ? 1.0 : 0.0;
    }
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
    return cdf + x * pdf;
}

// Columns [h·k, (h+1)·k) of an n × Hk matrix.
Matrix head_slice(const Matrix& m, std::size_t h, std::size_t k) { return slice_cols(m, h * k, (h + 1) * k); }

void put_head(Matrix& dst, const Matrix& src, std::size_t h, std::size_t k) {
    for (std::size_t i = 0; i < src.rows(); ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            dst(i, h * k + j) = src(i, j);
        }
    }
}

Matrix zeros_shaped(const Matrix& m) { return Matrix(m.rows(), m.cols()); }

}  // namespace

DenseLayer densify(const LayerParams& p, const ModelDims& dims, const LayerConfig& cfg) {
    DenseLayer L;
    L.heads = dims.heads;
    L.head_width = dims.head_dim;
    L.scale = 1.0 / std::sqrt(static_cast<double>(dims.head_dim));
    L.cfg = cfg;
    L.w_q = p.w_q;
    L.w_k = p.w_k;
    L.w_v = p.w_v;
    L.w_o_t = transpose(p.w_o);
    L.b_q = p.b_q;
    L.b_v = p.b_v;
    L.b_o = p.b_o;
    L.ln_gain = p.ln_gain;
    L.ln_bias = p.ln_bias;
    L.ln2_gain = p.ln2_gain;
    L.ln2_bias = p.ln2_bias;
    L.w_1 = p.w_1;
    L.b_1 = p.b_1;
    L.w_2 = p.w_2;
    L.b_2 = p.b_2;
    return L;
}

DenseLayer densify(const CompressedLayerParams& p, const ModelDims& dims, const LayerConfig& cfg) {
    DenseLayer L;
    L.heads = dims.heads;
    L.head_width = p.head_width();
    L.scale = 1.0 / std::sqrt(static_cast<double>(dims.head_dim));
    L.cfg = cfg;
    L.w_q = p.w_q;
    L.w_k = p.w_k;
    L.w_v = p.w_v;
    L.w_o_t = p.w_o_t;
    L.qk_bias = p.qk_bias;
    L.b_o = p.b_o;
    L.ln_gain = p.ln_gain;
    L.ln_bias = p.ln_bias;
    L.ln2_gain = p.ln2_gain;
    L.ln2_bias = p.ln2_bias;
    L.w_1 = p.ff_1.effective();
    L.b_1 = p.b_1;
    L.w_2 = p.ff_2.effective();
    L.b_2 = p.b_2;
    return L;
}

Matrix dense_forward(const DenseLayer& L, const Matrix& x, const ForwardOptions& opts, ForwardCache* cache,
                     AttentionTrace* trace) {
    const std::size_t d = L.w_q.cols();
    if (x.cols() != d) {
        throw ShapeError("layer input width " + std::to_string(x.cols()) + " != d_model " + std::to_string(d));
    }
    if (opts.cross_kv != nullptr && opts.cross_kv->cols() != d) {
        throw ShapeError("cross_kv width " + std::to_string(opts.cross_kv->cols()) + " != d_model " +
                         std::to_string(d));
    }
    const bool pre_ln = L.cfg.ff_residual_pre_ln;
    const std::size_t H = L.heads;
    const std::size_t k = L.head_width;
    const std::size_t n = x.rows();

    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c.x = x;
    c.self_kv = opts.cross_kv == nullptr;
    if (pre_ln) {
        c.q_src = layer_norm(x, L.ln_gain, L.ln_bias, L.cfg.ln_eps, c.ln1_hat, c.ln1_inv);
    } else {
        c.q_src = x;
    }
    c.kv_src = c.self_kv ? c.q_src : *opts.cross_kv;
    const std::size_t m = c.kv_src.rows();

    c.q = matmul_nt(c.q_src, L.w_q);
    add_row_bias(c.q, L.b_q);
    c.k = matmul_nt(c.kv_src, L.w_k);
    c.v = matmul_nt(c.kv_src, L.w_v);
    add_row_bias(c.v, L.b_v);

    c.probs.assign(H, Matrix());
    c.context = Matrix(n, H * k);
    if (trace) {
        *trace = AttentionTrace{};
    }
    for (std::size_t h = 0; h < H; ++h) {
        Matrix qh = head_slice(c.q, h, k);
        Matrix kh = head_slice(c.k, h, k);
        Matrix vh = head_slice(c.v, h, k);
        Matrix scores = matmul_nt(qh, kh);
        scores *= L.scale;
        if (!L.qk_bias.empty()) {
            // S_ij += x_j · g_h
            for (std::size_t j = 0; j < m; ++j) {
                double t = 0.0;
                for (std::size_t e = 0; e < d; ++e) {
                    t += c.kv_src(j, e) * L.qk_bias(h, e);
                }
                for (std::size_t i = 0; i < n; ++i) {
                    scores(i, j) += t;
                }
            }
        }
        if (opts.causal) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = i + 1; j < m; ++j) {
                    scores(i, j) = -INFINITY;
                }
            }
        }
        kernels::serial::softmax_rows(scores);
        Matrix ctx = matmul(scores, vh);
        put_head(c.context, ctx, h, k);
        if (trace) {
            trace->queries.push_back(std::move(qh));
            trace->keys.push_back(std::move(kh));
            trace->values.push_back(std::move(vh));
            trace->probs.push_back(scores);
            trace->context.push_back(std::move(ctx));
        }
        c.probs[h] = std::move(scores);
    }
    Matrix z = matmul(c.context, L.w_o_t);
    add_row_bias(z, L.b_o);
    check_finite(z, opts, "attention");

    Matrix resid = z;
    resid += x;
    if (pre_ln) {
        c.normed = layer_norm(resid, L.ln2_gain, L.ln2_bias, L.cfg.ln_eps, c.ln_hat, c.ln_inv);
    } else {
        c.normed = layer_norm(resid, L.ln_gain, L.ln_bias, L.cfg.ln_eps, c.ln_hat, c.ln_inv);
    }
    check_finite(c.normed, opts, "layer norm");
    if (trace) {
        trace->output = z;
        trace->normalized = c.normed;
    }

    c.pre_act = matmul_nt(c.normed, L.w_1);
    add_row_bias(c.pre_act, L.b_1);
    c.act = c.pre_act;
    for (auto& v : c.act.values()) {
        v = activate(L.cfg.activation, v);
    }
    Matrix out = matmul_nt(c.act, L.w_2);
    add_row_bias(out, L.b_2);
    if (pre_ln) {
        out += resid;
    }
    check_finite(out, opts, "feed-forward");
    return out;
}

DenseGradients dense_backward(const DenseLayer& L, const ForwardCache& c, const Matrix& upstream) {
    const bool pre_ln = L.cfg.ff_residual_pre_ln;
    const std::size_t H = L.heads;
    const std::size_t k = L.head_width;
    const std::size_t d = L.w_q.cols();
    const std::size_t n = c.x.rows();
    const std::size_t m = c.kv_src.rows();
    if (upstream.rows() != n || upstream.cols() != d) {
        throw ShapeError("upstream gradient " + upstream.shape_string() + " does not match layer output");
    }

    DenseGradients out;
    DenseLayer& g = out.grads;
    g.heads = H;
    g.head_width = k;
    g.ln_gain = zeros_shaped(L.ln_gain);
    g.ln_bias = zeros_shaped(L.ln_bias);
    g.ln2_gain = zeros_shaped(L.ln2_gain);
    g.ln2_bias = zeros_shaped(L.ln2_bias);

    // Feed-forward block.
    g.w_2 = matmul_tn(upstream, c.act);
    if (!L.b_2.empty()) {
        g.b_2 = colsum(upstream);
    }
    Matrix d_act = matmul(upstream, L.w_2);
    for (std::size_t i = 0; i < d_act.size(); ++i) {
        d_act.values()[i] *= activate_grad(L.cfg.activation, c.pre_act.values()[i]);
    }
    g.w_1 = matmul_tn(d_act, c.normed);
    if (!L.b_1.empty()) {
        g.b_1 = colsum(d_act);
    }
    Matrix d_normed = matmul(d_act, L.w_1);

    Matrix d_resid = pre_ln ? layer_norm_backward(d_normed, c.ln_hat, c.ln_inv, L.ln2_gain, g.ln2_gain, g.ln2_bias)
                            : layer_norm_backward(d_normed, c.ln_hat, c.ln_inv, L.ln_gain, g.ln_gain, g.ln_bias);
    if (pre_ln) {
        d_resid += upstream;
    }

    // Attention block: resid = z + x.
    const Matrix& dz = d_resid;
    if (!L.b_o.empty()) {
        g.b_o = colsum(dz);
    }
    g.w_o_t = matmul_tn(c.context, dz);
    Matrix d_context = matmul_nt(dz, L.w_o_t);

    Matrix dq(n, H * k);
    Matrix dk(m, H * k);
    Matrix dv(m, H * k);
    Matrix d_kv_src(m, d);
    if (!L.qk_bias.empty()) {
        g.qk_bias = Matrix(H, d);
    }
    for (std::size_t h = 0; h < H; ++h) {
        const Matrix& a = c.probs[h];
        Matrix dch = head_slice(d_context, h, k);
        Matrix vh = head_slice(c.v, h, k);
        Matrix qh = head_slice(c.q, h, k);
        Matrix kh = head_slice(c.k, h, k);
        Matrix da = matmul_nt(dch, vh);
        Matrix dvh = matmul_tn(a, dch);
        Matrix ds(n, m);
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                dot += da(i, j) * a(i, j);
            }
            for (std::size_t j = 0; j < m; ++j) {
                ds(i, j) = a(i, j) * (da(i, j) - dot);
            }
        }
        if (!L.qk_bias.empty()) {
            Matrix col = colsum(ds);  // 1 × m
            for (std::size_t j = 0; j < m; ++j) {
                const double t = col(0, j);
                for (std::size_t e = 0; e < d; ++e) {
                    g.qk_bias(h, e) += t * c.kv_src(j, e);
                    d_kv_src(j, e) += t * L.qk_bias(h, e);
                }
            }
        }
        ds *= L.scale;
        Matrix dqh = matmul(ds, kh);
        Matrix dkh = matmul_tn(ds, qh);
        put_head(dq, dqh, h, k);
        put_head(dk, dkh, h, k);
        put_head(dv, dvh, h, k);
    }

    g.w_q = matmul_tn(dq, c.q_src);
    if (!L.b_q.empty()) {
        g.b_q = colsum(dq);
    }
    Matrix d_q_src = matmul(dq, L.w_q);
    g.w_k = matmul_tn(dk, c.kv_src);
    g.w_v = matmul_tn(dv, c.kv_src);
    if (!L.b_v.empty()) {
        g.b_v = colsum(dv);
    }
    d_kv_src += matmul(dk, L.w_k);
    d_kv_src += matmul(dv, L.w_v);

    if (c.self_kv) {
        d_q_src += d_kv_src;
    } else {
        out.cross_kv = std::move(d_kv_src);
    }

    out.input = d_resid;
    if (pre_ln) {
        out.input += layer_norm_backward(d_q_src, c.ln1_hat, c.ln1_inv, L.ln_gain, g.ln_gain, g.ln_bias);
    } else {
        out.input += d_q_src;
    }
    return out;
}

void add_into(DenseLayer& acc, const DenseLayer& g) {
    Matrix DenseLayer::*members[] = {&DenseLayer::w_q,     &DenseLayer::w_k,      &DenseLayer::w_v,
                                     &DenseLayer::w_o_t,   &DenseLayer::b_q,      &DenseLayer::b_v,
                                     &DenseLayer::qk_bias, &DenseLayer::b_o,      &DenseLayer::ln_gain,
                                     &DenseLayer::ln_bias, &DenseLayer::ln2_gain, &DenseLayer::ln2_bias,
                                     &DenseLayer::w_1,     &DenseLayer::b_1,      &DenseLayer::w_2,
                                     &DenseLayer::b_2};
    for (auto m : members) {
        if (!(g.*m).empty()) {
            acc.*m += g.*m;
        }
    }
}

LayerParams pull_back(const DenseLayer& g, const LayerParams& like) {
    LayerParams out;
    out.w_q = g.w_q;
    out.w_k = g.w_k;
    out.w_v = g.w_v;
    out.w_o = transpose(g.w_o_t);
    out.w_1 = g.w_1;
    out.w_2 = g.w_2;
    out.b_q = like.b_q.empty() ? Matrix() : g.b_q;
    out.b_v = like.b_v.empty() ? Matrix() : g.b_v;
    out.b_o = like.b_o.empty() ? Matrix() : g.b_o;
    out.b_1 = like.b_1.empty() ? Matrix() : g.b_1;
    out.b_2 = like.b_2.empty() ? Matrix() : g.b_2;
    out.ln_gain = g.ln_gain;
    out.ln_bias = g.ln_bias;
    out.ln2_gain = g.ln2_gain;
    out.ln2_bias = g.ln2_bias;
    return out;
}

namespace {

// dW of u·v + a·b onto each factor.
FactoredWeight factor_grads(const Matrix& dw, const FactoredWeight& f) {
    FactoredWeight out;
    out.u = matmul_nt(dw, f.v);
    out.v = matmul_tn(f.u, dw);
    out.a = matmul_nt(dw, f.b);
    out.b = matmul_tn(f.a, dw);
    return out;
}

}  // namespace

CompressedLayerParams pull_back(const DenseLayer& g, const CompressedLayerParams& like) {
    CompressedLayerParams out;
    out.ranks = like.ranks;
    out.quantized = like.quantized;
    out.w_q = g.w_q;
    out.w_k = g.w_k;
    out.w_v = g.w_v;
    out.w_o_t = g.w_o_t;
    out.qk_bias = like.qk_bias.empty() ? Matrix() : g.qk_bias;
    out.ff_1 = factor_grads(g.w_1, like.ff_1);
    out.ff_2 = factor_grads(g.w_2, like.ff_2);
    out.b_o = like.b_o.empty() ? Matrix() : g.b_o;
    out.b_1 = like.b_1.empty() ? Matrix() : g.b_1;
    out.b_2 = like.b_2.empty() ? Matrix() : g.b_2;
    out.ln_gain = g.ln_gain;
    out.ln_bias = g.ln_bias;
    out.ln2_gain = g.ln2_gain;
    out.ln2_bias = g.ln2_bias;
    return out;
}

}  // namespace adaptwin::detail
