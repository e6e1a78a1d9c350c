// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/assemble.hpp"
#include "adaptwin/errors.hpp"
#include "adaptwin/finetune.hpp"
#include "adaptwin/toy.hpp"
#include "doctest.h"

using namespace adaptwin;

namespace {

ModelDims dims4() {
    ModelDims d;
    d.d_model = 16;
    d.heads = 2;
    d.head_dim = 8;
    d.d_ff = 32;
    d.n_layers = 4;
    d.vocab = 16;
    return d;
}

MixedModel compressed_model(const Model& m, const RankPlan& plan) {
    MixedModel mm = make_mixed(m);
    for (std::size_t j = 0; j < m.layers.size(); ++j) {
        mm.compressed[j] = compress_layer(m.layers[j], m.dims, m.config, plan, {InitStrategy::Svd, layer_seed(1, j), 0.0});
    }
    return mm;
}

}  // namespace

TEST_SUITE("assemble") {

TEST_CASE("all-original model reproduces the source bit for bit") {
    for (bool causal : {false, true}) {
        const Model m = gen_toy(dims4(), {}, 1, causal);
        const MixedModel mm = compressed_model(m, {4, 1, 9, 1});
        for (const auto& s : sample_sequences(broad_distribution(m.dims), 10, 2)) {
            CHECK(mixed_forward(mm, s) == model_forward(m, s));
        }
        CHECK(mm.active_compressed() == 0);
    }
}

TEST_CASE("swapping a layer in and back out restores the logits") {
    const Model m = gen_toy(dims4(), {}, 3);
    const MixedModel mm = compressed_model(m, {4, 1, 9, 1});
    const auto seqs = sample_sequences(narrow_distribution(m.dims), 3, 4);
    const MixedModel on = swap(mm, 2, SlotKind::Compressed);
    CHECK(on.active_compressed() == 1);
    CHECK_FALSE(mixed_forward(on, seqs[0]) == model_forward(m, seqs[0]));
    const MixedModel off = swap(on, 2, SlotKind::Original);
    for (const auto& s : seqs) {
        CHECK(mixed_forward(off, s) == model_forward(m, s));
    }
}

TEST_CASE("compressing a layer leaves earlier hidden states untouched") {
    const Model m = gen_toy(dims4(), {}, 5);
    const MixedModel mm = compressed_model(m, {4, 1, 9, 1});
    const TokenSeq s = sample_sequences(broad_distribution(m.dims), 1, 6)[0];
    const auto ref = mixed_hidden_states(mm, s);
    const auto got = mixed_hidden_states(swap(mm, 2, SlotKind::Compressed), s);
    REQUIRE(got.size() == 5);
    for (std::size_t j = 0; j <= 2; ++j) {
        CHECK(got[j] == ref[j]);
    }
    CHECK_FALSE(got[3] == ref[3]);
}

TEST_CASE("swap errors") {
    const Model m = gen_toy(dims4(), {}, 7);
    MixedModel mm = make_mixed(m);
    CHECK_THROWS_AS(swap(mm, 0, SlotKind::Compressed), AssemblyError);
    CHECK_THROWS_AS(swap(mm, 4, SlotKind::Original), AssemblyError);
    mm.active[1] = SlotKind::Compressed;
    CHECK_THROWS_AS(mm.validate(), AssemblyError);
    mm = make_mixed(m);
    mm.compressed.pop_back();
    CHECK_THROWS_AS(mm.validate(), AssemblyError);
    const std::vector<std::size_t> order{0};
    const auto inputs = sample_sequences(narrow_distribution(m.dims), 1, 1);
    CHECK_THROWS_AS(sweep(make_mixed(m), order, inputs), AssemblyError);
}

TEST_CASE("sweep emits a deterministic curve starting at zero divergence") {
    const Model m = gen_toy(dims4(), {}, 9);
    const MixedModel mm = compressed_model(m, {4, 1, 9, 1});
    const auto inputs = sample_sequences(broad_distribution(m.dims), 6, 10);
    const auto order = first_to_last_order(4);
    const auto a = sweep(mm, order, inputs);
    const auto b = sweep(mm, order, inputs);
    REQUIRE(a.size() == 5);
    CHECK(a[0].divergence.relative == 0.0);
    CHECK(a[0].divergence.agreement == 1.0);
    CHECK(a[0].retained_fraction == 1.0);
    for (std::size_t k = 0; k < a.size(); ++k) {
        CHECK(a[k].compressed_layers == k);
        CHECK(a[k].divergence.relative == b[k].divergence.relative);
        CHECK(a[k].divergence.agreement == b[k].divergence.agreement);
        if (k > 0) {
            CHECK(a[k].retained_fraction < a[k - 1].retained_fraction);
            CHECK(a[k].divergence.relative > 0.0);
        }
    }
    const auto last = accounting(with_compressed(mm, order));
    CHECK(a[4].retained_fraction == last.retained_fraction);
}

TEST_CASE("a swapped-back slot has zero objective") {
    const Model m = gen_toy(dims4(), {}, 11);
    const MixedModel mm = compressed_model(m, {4, 1, 9, 1});
    const auto inputs = sample_sequences(narrow_distribution(m.dims), 8, 12);
    const auto pairs = capture_all_hidden_states(m, inputs);
    const auto all = first_to_last_order(4);
    const MixedModel full = with_compressed(mm, all);
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(slot_objective(full, j, pairs[j]) > 0.0);
        CHECK(slot_objective(full, j, pairs[j]) == doctest::Approx(layer_objective(*mm.compressed[j], pairs[j], m.config)));
        CHECK(slot_objective(swap(full, j, SlotKind::Original), j, pairs[j]) == 0.0);
    }
}

TEST_CASE("greedy order puts the worst layer first") {
    const std::vector<double> obj{0.5, 2.0, 2.0, 1.0};
    CHECK(greedy_order(obj) == std::vector<std::size_t>{1, 2, 3, 0});
    CHECK(first_to_last_order(3) == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("accounting follows the active slots") {
    const Model m = gen_toy(dims4(), {}, 13);
    MixedModel mm = compressed_model(m, {4, 1, 9, 1});
    CHECK(accounting(mm).retained_fraction == 1.0);
    const auto one = accounting(swap(mm, 0, SlotKind::Compressed));
    const auto plan_one = [&] {
        CompressionPlan p;
        p.layers.resize(4);
        p.layers[0].ranks = RankPlan{4, 1, 9, 1};
        return p;
    }();
    CHECK(one.retained_fraction == accounting(m.dims, plan_one).retained_fraction);
    mm.compressed[0]->quantized = true;
    CHECK(accounting(swap(mm, 0, SlotKind::Compressed)).bytes < one.bytes);
}

}  // TEST_SUITE
