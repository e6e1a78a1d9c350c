// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include "adaptwin/compress.hpp"
#include "adaptwin/errors.hpp"
#include "adaptwin/linalg.hpp"
#include "doctest.h"
#include "test_util.hpp"

using adaptwin::Matrix;
using adaptwin::ModelDims;
using adaptwin::RankPlan;
using testutil::gaussian;

namespace {

ModelDims dims_of(std::size_t d, std::size_t h, std::size_t dff) {
    ModelDims m;
    m.d_model = d;
    m.heads = h;
    m.head_dim = d / h;
    m.d_ff = dff;
    m.n_layers = 1;
    return m;
}

ModelDims whisper_base() {
    ModelDims m = dims_of(512, 8, 2048);
    m.n_layers = 6;
    return m;
}

double tail_energy(const std::vector<double>& sigma, std::size_t r) {
    double s = 0;
    for (std::size_t i = r; i < sigma.size(); ++i) s += sigma[i] * sigma[i];
    return std::sqrt(s);
}

}  // namespace

TEST_SUITE("compress") {

TEST_CASE("twin_factor at full rank is exact") {
    std::mt19937_64 rng(1);
    const Matrix p = gaussian(16, 4, rng), q = gaussian(4, 12, rng);
    const auto t = adaptwin::twin_factor(p, q, 4, 0, rng, 0.25);
    CHECK(t.p.rows() == 16);
    CHECK(t.p.cols() == 4);
    CHECK(t.q.rows() == 4);
    CHECK(t.q.cols() == 12);
    CHECK(testutil::rel_err(adaptwin::matmul(t.p, t.q), adaptwin::matmul(p, q)) <= 1e-10);
}

TEST_CASE("twin_factor LoRA blocks start neutral") {
    std::mt19937_64 rng(2);
    const Matrix p = gaussian(16, 6, rng), q = gaussian(6, 16, rng);
    const auto t = adaptwin::twin_factor(p, q, 3, 2, rng, 0.25);
    REQUIRE(t.p.cols() == 5);
    const Matrix b = slice_rows(t.q, 3, 5);
    CHECK(b == Matrix(2, 16));
    CHECK(adaptwin::fro_norm(slice_cols(t.p, 3, 5)) > 0.0);
    const auto s = adaptwin::truncate(adaptwin::svd(adaptwin::matmul(p, q)), 3);
    CHECK(testutil::max_abs_diff(adaptwin::matmul(t.p, t.q), adaptwin::matmul(s.left, s.right)) <= 1e-12);
}

TEST_CASE("joint truncation beats independent truncation") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 25; ++trial) {
        const Matrix p = gaussian(16, 4, rng), q = gaussian(4, 16, rng);
        const Matrix m = adaptwin::matmul(p, q);
        const auto sp = adaptwin::svd(p), sq = adaptwin::svd(q), sm = adaptwin::svd(m);
        for (std::size_t r = 1; r <= 3; ++r) {
            const auto t = adaptwin::twin_factor(p, q, r, 0, rng, 0.25);
            const double joint = adaptwin::fro_norm(m - adaptwin::matmul(t.p, t.q));
            const auto tp = adaptwin::truncate(sp, r), tq = adaptwin::truncate(sq, r);
            const Matrix indep =
                adaptwin::matmul(adaptwin::matmul(tp.left, tp.right), adaptwin::matmul(tq.left, tq.right));
            CHECK(joint <= adaptwin::fro_norm(m - indep) + 1e-12);
            CHECK(std::abs(joint - tail_energy(sm.sigma, r)) <= 1e-9);
        }
    }
}

TEST_CASE("twin_factor rank bounds") {
    std::mt19937_64 rng(4);
    const Matrix p = gaussian(8, 4, rng), q = gaussian(4, 8, rng);
    CHECK_THROWS_AS(adaptwin::twin_factor(p, q, 0, 0, rng, 0.1), adaptwin::PlanError);
    CHECK_THROWS_AS(adaptwin::twin_factor(p, q, 3, 2, rng, 0.1), adaptwin::PlanError);
    CHECK_THROWS_AS(adaptwin::twin_factor(p, gaussian(3, 8, rng), 1, 0, rng, 0.1), adaptwin::ShapeError);
}

TEST_CASE("compress_ff") {
    std::mt19937_64 rng(5);
    const Matrix w = gaussian(32, 64, rng);
    const auto full = adaptwin::compress_ff(w, 32, 0, rng, 0.1);
    CHECK(testutil::rel_err(full.effective(), w) <= 1e-10);
    const auto f = adaptwin::compress_ff(w, 8, 0, rng, 0.1);
    const auto s = adaptwin::svd(w);
    CHECK(std::abs(adaptwin::fro_norm(w - f.effective()) - tail_energy(s.sigma, 8)) <= 1e-9);
    const auto g = adaptwin::compress_ff(w, 8, 2, rng, 0.1);
    CHECK(g.a.rows() == 32);
    CHECK(g.a.cols() == 2);
    CHECK(g.b == Matrix(2, 64));
    CHECK(testutil::max_abs_diff(g.effective(), f.effective()) <= 1e-12);
    CHECK_THROWS_AS(adaptwin::compress_ff(w, 30, 3, rng, 0.1), adaptwin::PlanError);
}

TEST_CASE("retained fractions at the published ranks") {
    const ModelDims wb = whisper_base();
    const RankPlan plan{32, 8, 162, 18};
    const double attn = static_cast<double>(adaptwin::compressed_attention_count(wb, plan)) /
                        static_cast<double>(adaptwin::attention_weight_count(wb));
    CHECK(attn == doctest::Approx(40.0 / 64.0).epsilon(1e-15));
    const double ff = static_cast<double>(adaptwin::compressed_ff_count(wb, plan)) /
                      static_cast<double>(adaptwin::ff_weight_count(wb));
    CHECK(ff == doctest::Approx(180.0 * 2560.0 / 1048576.0).epsilon(1e-15));
    CHECK(std::abs(ff - 0.4395) < 1e-4);
}

TEST_CASE("exact-rank compression reproduces the layer") {
    std::mt19937_64 rng(6);
    const ModelDims dims = dims_of(32, 4, 128);
    for (bool pre : {false, true}) {
        adaptwin::LayerConfig cfg;
        cfg.ff_residual_pre_ln = pre;
        const auto p = testutil::random_layer(dims, cfg, rng);
        const auto c = adaptwin::compress_layer(p, dims, cfg, {8, 0, 32, 0});
        const Matrix x = gaussian(9, 32, rng);
        const Matrix cross = gaussian(5, 32, rng);
        CHECK(testutil::rel_err(adaptwin::layer_forward(c, dims, cfg, x), adaptwin::layer_forward(p, dims, cfg, x)) <=
              1e-8);
        adaptwin::ForwardOptions o;
        o.cross_kv = &cross;
        o.causal = true;
        CHECK(testutil::rel_err(adaptwin::layer_forward(c, dims, cfg, x, o),
                                adaptwin::layer_forward(p, dims, cfg, x, o)) <= 1e-8);
    }
}

TEST_CASE("compressed attention equals softmax of jointly truncated logits") {
    std::mt19937_64 rng(7);
    const ModelDims dims = dims_of(16, 4, 32);
    const auto p = testutil::random_layer(dims, {}, rng, false);
    const auto c = adaptwin::compress_layer(p, dims, {}, {2, 0, 8, 0});
    const Matrix x = gaussian(6, 16, rng);
    adaptwin::AttentionTrace t;
    adaptwin::layer_forward(c, dims, {}, x, {}, &t);
    for (std::size_t h = 0; h < 4; ++h) {
        const Matrix m = adaptwin::matmul_tn(slice_rows(p.w_q, 4 * h, 4 * h + 4), slice_rows(p.w_k, 4 * h, 4 * h + 4));
        const auto tr = adaptwin::truncate(adaptwin::svd(m), 2);
        Matrix logits = adaptwin::matmul_nt(adaptwin::matmul(x, adaptwin::matmul(tr.left, tr.right)), x);
        logits *= 0.5;  // 1/√d_h with d_h = 4
        for (std::size_t i = 0; i < logits.rows(); ++i) {
            double mx = -INFINITY, z = 0;
            for (double v : logits.row(i)) mx = std::max(mx, v);
            for (double& v : logits.row(i)) z += (v = std::exp(v - mx));
            for (double& v : logits.row(i)) v /= z;
        }
        CHECK(testutil::max_abs_diff(t.probs[h], logits) <= 1e-12);
    }
}

TEST_CASE("zero-init neutrality") {
    std::mt19937_64 rng(8);
    const ModelDims dims = dims_of(32, 4, 128);
    const auto p = testutil::random_layer(dims, {}, rng);
    adaptwin::CompressOptions o;
    o.seed = 17;
    const auto c = adaptwin::compress_layer(p, dims, {}, {4, 2, 9, 3}, o);
    CHECK_NOTHROW(c.validate(dims, {}));
    // Pure spectral: zero the LoRA A blocks so only spectral products remain.
    auto pure = c;
    for (auto* m : {&pure.w_q, &pure.w_v}) {
        for (std::size_t h = 0; h < 4; ++h)
            for (std::size_t r = 4; r < 6; ++r)
                for (std::size_t e = 0; e < 32; ++e) (*m)(h * 6 + r, e) = 0.0;
    }
    pure.ff_1.a.fill(0.0);
    pure.ff_2.a.fill(0.0);
    for (auto* m : {&c.w_k, &c.w_o_t}) {
        for (std::size_t h = 0; h < 4; ++h)
            for (std::size_t r = 4; r < 6; ++r)
                for (std::size_t e = 0; e < 32; ++e) CHECK((*m)(h * 6 + r, e) == 0.0);
    }
    const Matrix x = gaussian(7, 32, rng);
    CHECK(testutil::max_abs_diff(adaptwin::layer_forward(c, dims, {}, x), adaptwin::layer_forward(pure, dims, {}, x)) <=
          1e-10);
}

TEST_CASE("compression is deterministic per seed") {
    std::mt19937_64 rng(9);
    const ModelDims dims = dims_of(16, 2, 32);
    const auto p = testutil::random_layer(dims, {}, rng);
    adaptwin::CompressOptions o;
    o.seed = 5;
    const auto a = adaptwin::compress_layer(p, dims, {}, {4, 1, 9, 1}, o);
    const auto b = adaptwin::compress_layer(p, dims, {}, {4, 1, 9, 1}, o);
    CHECK(a == b);
    o.seed = 6;
    CHECK_FALSE(adaptwin::compress_layer(p, dims, {}, {4, 1, 9, 1}, o) == a);
}

TEST_CASE("scratch initialization has no spectral part") {
    std::mt19937_64 rng(10);
    const ModelDims dims = dims_of(16, 2, 32);
    const auto p = testutil::random_layer(dims, {}, rng);
    adaptwin::CompressOptions o;
    o.init = adaptwin::InitStrategy::Scratch;
    const auto c = adaptwin::compress_layer(p, dims, {}, {0, 5, 0, 10}, o);
    CHECK(c.w_q.rows() == 10);
    CHECK(c.ff_1.u.cols() == 0);
    CHECK(c.ff_1.a.cols() == 10);
    CHECK(adaptwin::fro_norm(c.ff_1.b) > 0);
    CHECK(adaptwin::fro_norm(c.w_k) > 0);
    CHECK_THROWS_AS(adaptwin::compress_layer(p, dims, {}, {4, 1, 9, 1}, o), adaptwin::PlanError);
    CHECK_THROWS_AS(adaptwin::compress_layer(p, dims, {}, {0, 5, 0, 10}), adaptwin::PlanError);
}

TEST_CASE("split and stack heads round-trip") {
    std::mt19937_64 rng(11);
    const Matrix m = gaussian(12, 5, rng);
    const auto blocks = adaptwin::split_heads(m, 3);
    REQUIRE(blocks.size() == 3);
    CHECK(blocks[1] == slice_rows(m, 4, 8));
    CHECK(adaptwin::stack_heads(blocks) == m);
    CHECK_THROWS_AS(adaptwin::split_heads(m, 5), adaptwin::ShapeError);
}

TEST_CASE("make_plan reproduces the published ranks") {
    const auto plan = adaptwin::make_plan(whisper_base(), 0.5);
    CHECK(plan == RankPlan{32, 8, 162, 18});
    const auto rep = adaptwin::accounting(whisper_base(), adaptwin::CompressionPlan::uniform(6, plan));
    CHECK(std::abs(rep.removed_fraction - 0.4987) < 1e-4);
    CHECK(std::abs(rep.retained_fraction - 0.5013) < 1e-4);
    CHECK(rep.retained_fraction == doctest::Approx((1.0 / 3.0) * 0.625 + (2.0 / 3.0) * (180.0 * 2560 / 1048576.0)));
}

TEST_CASE("make_plan on toy dims") {
    ModelDims toy;
    CHECK(adaptwin::make_plan(toy, 0.5) == RankPlan{8, 2, 18, 2});
    CHECK(adaptwin::make_plan(dims_of(32, 4, 128), 0.5) == RankPlan{4, 1, 9, 1});
}

TEST_CASE("make_plan bounds") {
    CHECK_THROWS_AS(adaptwin::make_plan(whisper_base(), 0.0), adaptwin::PlanError);
    CHECK_THROWS_AS(adaptwin::make_plan(whisper_base(), 1.0), adaptwin::PlanError);
    try {
        adaptwin::make_plan(whisper_base(), 0.001);
        FAIL("expected PlanError");
    } catch (const adaptwin::PlanError& e) {
        CHECK(std::string(e.what()).find("feasible targets") != std::string::npos);
    }
    const auto range = adaptwin::feasible_targets(whisper_base());
    CHECK_FALSE(range.empty);
    CHECK(range.lo < 0.5);
    CHECK(range.hi > 0.5);
}

TEST_CASE("make_plan is monotone in the target") {
    for (const ModelDims& dims : {whisper_base(), ModelDims{}, dims_of(32, 4, 128)}) {
        const auto range = adaptwin::feasible_targets(dims);
        RankPlan prev{1000, 1000, 100000, 100000};
        for (double t = range.lo; t <= range.hi; t += 0.01) {
            const auto p = adaptwin::make_plan(dims, t);
            CHECK(p.attn_width() <= prev.attn_width());
            CHECK(p.ff_width() <= prev.ff_width());
            CHECK(p.attn_rank >= p.attn_lora);
            CHECK(p.ff_rank >= p.ff_lora);
            prev = p;
        }
    }
}

TEST_CASE("make_plan attention ratio override") {
    const auto a = adaptwin::make_plan(whisper_base(), 0.5, 1.0);
    CHECK(a.attn_width() < 40);
}

TEST_CASE("accounting") {
    const ModelDims wb = whisper_base();
    adaptwin::CompressionPlan keep;
    keep.layers.resize(6);
    CHECK(adaptwin::accounting(wb, keep).retained_fraction == 1.0);
    CHECK(adaptwin::accounting(wb, keep).byte_fraction == 1.0);

    // Quantized layers at 0.8 retained occupy a fifth of the 32-bit bytes, up to scales.
    const ModelDims toy;
    adaptwin::CompressionPlan q = adaptwin::CompressionPlan::uniform(4, {8, 2, 18, 2}, true);
    auto rep = adaptwin::accounting(toy, q);
    CHECK(rep.nominal_byte_fraction == doctest::Approx(rep.retained_fraction / 4.0));
    adaptwin::LayerSize synthetic;
    synthetic.compressed = synthetic.quantized = true;
    synthetic.original_weights = 1000;
    synthetic.weights = 800;
    CHECK(adaptwin::summarize({synthetic}, 32).nominal_byte_fraction == doctest::Approx(0.2));

    // Bytes of quantized factors include one f32 scale per row.
    const auto one = adaptwin::layer_size(toy, {RankPlan{8, 2, 18, 2}, true});
    const std::size_t attn = 4 * (4 * 10 * 64 + 4 * 40);
    const std::size_t ff = (256 * 18 + 4 * 256) + (18 * 64 + 4 * 18) + (256 * 2 + 4 * 256) + (2 * 64 + 4 * 2) +
                           (64 * 18 + 4 * 64) + (18 * 256 + 4 * 18) + (64 * 2 + 4 * 64) + (2 * 256 + 4 * 2);
    CHECK(one.bytes == attn + ff);
    CHECK(adaptwin::int8_tensor_bytes(0, 5) == 0);
    CHECK(adaptwin::int8_tensor_bytes(3, 5) == 27);
    CHECK_THROWS_AS(adaptwin::accounting(toy, q, 8), adaptwin::ConfigError);

    // Whole-model retained fraction is the weighted mean of the layers.
    adaptwin::CompressionPlan mixed = adaptwin::CompressionPlan::uniform(4, {8, 2, 18, 2});
    mixed.layers[1].ranks.reset();
    mixed.layers[3].ranks = RankPlan{4, 1, 9, 1};
    rep = adaptwin::accounting(toy, mixed);
    double num = 0, den = 0;
    for (const auto& l : rep.layers) {
        num += l.retained() * static_cast<double>(l.original_weights);
        den += static_cast<double>(l.original_weights);
    }
    CHECK(rep.retained_fraction == doctest::Approx(num / den).epsilon(1e-14));
}

TEST_CASE("compression plan validation") {
    const ModelDims toy;
    auto plan = adaptwin::CompressionPlan::uniform(4, {8, 2, 18, 2});
    CHECK_NOTHROW(plan.validate(toy));
    plan.layers.pop_back();
    CHECK_THROWS_AS(plan.validate(toy), adaptwin::PlanError);
    adaptwin::CompressionPlan none;
    none.layers.resize(4);
    CHECK_THROWS_AS(none.validate(toy), adaptwin::PlanError);
    CHECK_NOTHROW(none.validate(toy, false));
    auto bad = adaptwin::CompressionPlan::uniform(4, {2, 3, 18, 2});
    CHECK_THROWS_AS(bad.validate(toy), adaptwin::PlanError);
    bad = adaptwin::CompressionPlan::uniform(4, {16, 1, 18, 2});
    CHECK_THROWS_AS(bad.validate(toy), adaptwin::PlanError);
}

TEST_CASE("layer seeds differ per layer") {
    CHECK(adaptwin::layer_seed(1, 0) != adaptwin::layer_seed(1, 1));
    CHECK(adaptwin::layer_seed(1, 0) != adaptwin::layer_seed(2, 0));
    CHECK(adaptwin::layer_seed(1, 3) == adaptwin::layer_seed(1, 3));
}

}  // TEST_SUITE
