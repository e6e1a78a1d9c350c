// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <set>

#include "adaptwin/errors.hpp"
#include "adaptwin/linalg.hpp"
#include "adaptwin/toy.hpp"
#include "doctest.h"

using namespace adaptwin;

namespace {

ModelDims tiny() {
    ModelDims d;
    d.d_model = 16;
    d.heads = 2;
    d.head_dim = 8;
    d.d_ff = 32;
    d.n_layers = 2;
    d.vocab = 12;
    return d;
}

}  // namespace

TEST_SUITE("toy") {

TEST_CASE("edit distance") {
    const std::vector<int> a{1, 2, 3, 4}, b{1, 3, 4, 5}, e{};
    CHECK(edit_distance(a, a) == 0);
    CHECK(edit_distance(a, b) == 2);
    CHECK(edit_distance(a, e) == 4);
    CHECK(edit_distance(e, b) == 4);
    CHECK(edit_distance(std::vector<int>{1, 2}, std::vector<int>{2, 1}) == 2);
}

TEST_CASE("distributions respect alphabet and length") {
    const ModelDims d;  // vocab 32
    const auto narrow = narrow_distribution(d);
    const auto broad = broad_distribution(d);
    CHECK(narrow.alphabet == 8);
    CHECK(broad.alphabet == 32);
    for (const auto& s : sample_sequences(narrow, 200, 1)) {
        CHECK(s.size() == 12);
        CHECK(*std::max_element(s.begin(), s.end()) < 8);
    }
    std::set<std::size_t> lengths;
    for (const auto& s : sample_sequences(broad, 500, 2)) {
        lengths.insert(s.size());
        CHECK(*std::min_element(s.begin(), s.end()) >= 0);
        CHECK(*std::max_element(s.begin(), s.end()) < 32);
    }
    CHECK(*lengths.begin() == 4);
    CHECK(*lengths.rbegin() == 20);
    CHECK(sample_sequences(narrow, 5, 3) == sample_sequences(narrow, 5, 3));
    CHECK_THROWS_AS(ToyDistribution({"x", 40, 1, 2}).validate(32), ConfigError);
    CHECK_THROWS_AS(sample_sequences({"x", 4, 5, 2}, 1, 0), ConfigError);
}

TEST_CASE("gen_toy is deterministic and f32-exact") {
    const Model a = gen_toy(ModelDims{}, {}, 42);
    CHECK(a == gen_toy(ModelDims{}, {}, 42));
    CHECK_FALSE(a == gen_toy(ModelDims{}, {}, 43));
    CHECK(a.layers[0].w_q == round_to_f32(a.layers[0].w_q));
    CHECK(a.token_embedding == round_to_f32(a.token_embedding));
    std::size_t floats = a.token_embedding.size() + a.readout.size() + a.readout_bias.size();
    Model copy = a;
    for (auto& l : copy.layers) {
        for (const auto& r : parameters(l)) {
            floats += r.tensor->size();
        }
    }
    CHECK(4 * floats < 2u * 1024 * 1024);
}

TEST_CASE("spectral decay shapes singular values") {
    const ModelDims d = tiny();
    const Model flat = gen_toy(d, {}, 1);
    const Model shaped = gen_toy(d, {}, 1, false, 1.0);
    const auto s = svd(shaped.layers[0].w_1).sigma;
    for (std::size_t i = 1; i < s.size(); ++i) {
        CHECK(s[i] / s[0] == doctest::Approx(1.0 / static_cast<double>(i + 1)).epsilon(1e-5));
    }
    CHECK(fro_norm(shaped.layers[0].w_1) == doctest::Approx(fro_norm(flat.layers[0].w_1)).epsilon(1e-6));
    // Per-head blocks of the query stack are shaped independently.
    const Matrix head = slice_rows(shaped.layers[0].w_q, 8, 16);
    const auto sh = svd(head).sigma;
    CHECK(sh[1] / sh[0] == doctest::Approx(0.5).epsilon(1e-5));
    CHECK(flat.layers[0].b_1 == shaped.layers[0].b_1);
    CHECK_THROWS_AS(gen_toy(d, {}, 1, false, -1.0), ConfigError);
}

TEST_CASE("tasks and predictions") {
    CHECK(task_target(ToyTask::Copy, {1, 2, 3}) == TokenSeq{1, 2, 3});
    CHECK(task_target(ToyTask::Reverse, {1, 2, 3}) == TokenSeq{3, 2, 1});
    CHECK(parse_toy_task("reverse") == ToyTask::Reverse);
    CHECK_THROWS_AS(parse_toy_task("sort"), ConfigError);
    const Model m = gen_toy(tiny(), {}, 5);
    const TokenSeq s{0, 3, 5, 7};
    CHECK(predict(m, s).size() == s.size());
    CHECK(token_error_rate(m, ToyTask::Copy, std::vector<TokenSeq>{}) == 0.0);
}

TEST_CASE("untrained loss is near log(vocab) and training learns copy") {
    const ModelDims d = tiny();
    const Model m = gen_toy(d, {}, 7);
    ToyTrainConfig c;
    c.steps = 1;
    c.lr = 1e-12;
    c.seed = 1;
    const auto r0 = train_toy(m, c);
    REQUIRE(r0.loss.size() == 1);
    CHECK(r0.loss[0] > 0.5 * std::log(static_cast<double>(d.vocab)));
    c.steps = 80;
    c.lr = 3e-3;
    c.eval_count = 50;
    const auto r = train_toy(m, c);
    CHECK(r.steps_run == 80);
    CHECK(r.loss.back() < 0.2 * r.loss.front());
    CHECK(r.accuracy >= 0.95);
    const auto eval = sample_sequences(broad_distribution(d), 50, 99);
    CHECK(token_error_rate(r.model, ToyTask::Copy, eval) <= 0.05);
    CHECK(train_toy(m, c).model == r.model);
}

}  // TEST_SUITE
