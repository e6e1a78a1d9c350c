// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <random>
#include <sstream>

#include "adaptwin/errors.hpp"
#include "adaptwin/pipeline.hpp"
#include "doctest.h"

using namespace adaptwin;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("adaptwin_pipe_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

RunConfig small_config(const fs::path& dir) {
    RunConfig c;
    c.dims.d_model = 16;
    c.dims.heads = 2;
    c.dims.head_dim = 8;
    c.dims.d_ff = 32;
    c.dims.n_layers = 2;
    c.dims.vocab = 16;
    c.target = 0.3;
    c.train.epochs = 3;
    c.capture_samples = 16;
    c.eval_samples = 8;
    c.seed = 11;
    c.work_dir = dir;
    c.sweep.targets = {0.3};
    c.sweep.epochs = 2;
    return c;
}

double div(const Json& report, const char* which, const char* set) {
    return report[which]["sets"][set]["divergence"].get<double>();
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("config parsing rejects unknown keys and bad plans") {
    CHECK_THROWS_AS(run_config_from_json({{"bogus", 1}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"train", {{"epoch", 3}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"capture", {{"distribution", "narrow"}, {"count", 3}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"dims", {{"d_model", -4}}}}), ConfigError);

    TempDir dir;
    const RunConfig c = small_config(dir.path);
    const RunConfig back = run_config_from_json(to_json(c));
    CHECK(config_hash(back) == config_hash(c));
    CHECK(back.target == c.target);
    CHECK(back.seed == c.seed);

    RunConfig both = c;
    both.ranks = RankPlan{2, 1, 4, 1};
    CHECK_THROWS_AS(both.validate(), ConfigError);

    RunConfig wide = c;
    wide.target.reset();
    wide.ranks = RankPlan{9, 0, 4, 0};  // r_a beyond head_dim
    CHECK_THROWS_AS(wide.validate(), PlanError);
    CHECK_THROWS_AS(run_pipeline(wide), PlanError);
    CHECK_FALSE(fs::exists(dir.path / "source.adpt"));

    RunConfig unseeded = c;
    unseeded.seed.reset();
    CHECK_THROWS_AS(run_pipeline(unseeded), ConfigError);

    RunConfig infeasible = c;
    infeasible.target = 0.5;
    CHECK_THROWS_AS(infeasible.validate(), PlanError);

    // The work dir and worker count do not enter the config hash.
    RunConfig moved = c;
    moved.work_dir = "elsewhere";
    moved.workers = 3;
    CHECK(config_hash(moved) == config_hash(c));
    moved.train.lr = 2e-4;
    CHECK(config_hash(moved) != config_hash(c));
}

TEST_CASE("identity plan leaves the model unchanged") {
    TempDir dir;
    RunConfig c = small_config(dir.path);
    c.target.reset();
    c.plan = CompressionPlan{};
    c.plan->layers.resize(2);
    const Json r = run_pipeline(c);
    for (const char* set : {"narrow", "broad"}) {
        CHECK(div(r, "finetuned", set) == 0.0);
        CHECK(r["finetuned"]["sets"][set]["agreement"] == 1.0);
    }
    CHECK(r["finetuned"]["accounting"]["retained_fraction"] == 1.0);
}

TEST_CASE("full-rank plan without fine-tuning reproduces the source") {
    TempDir dir;
    RunConfig c = small_config(dir.path);
    c.target.reset();
    c.ranks = RankPlan{8, 0, 16, 0};
    c.finetune = false;
    const Json r = run_pipeline(c);
    for (const char* set : {"narrow", "broad"}) {
        CHECK(div(r, "svd", set) <= 1e-6);
        CHECK(div(r, "finetuned", set) == div(r, "svd", set));
    }
    CHECK_FALSE(fs::exists(dir.path / "finetuned.adpt"));
}

TEST_CASE("reruns are idempotent and resume from saved stages") {
    TempDir a, b;
    const RunConfig ca = small_config(a.path);
    const RunConfig cb = small_config(b.path);
    std::ostringstream log_a, log_b;
    const Json ra = run_pipeline(ca, &log_a);
    const Json rb = run_pipeline(cb, &log_b);
    CHECK(ra == rb);
    for (const char* f : {"source.adpt", "plan.adpt", "pairs/layer0.adpt", "pairs/layer1.adpt", "compressed.adpt",
                          "finetuned.adpt", "report.adpt"}) {
        CAPTURE(f);
        CHECK(file_sha256(a.path / f) == file_sha256(b.path / f));
    }
    CHECK(log_a.str().find("reused") == std::string::npos);

    const std::string before = file_sha256(a.path / "report.adpt");
    std::ostringstream again;
    CHECK(run_pipeline(ca, &again) == ra);
    CHECK(again.str().find("[finetune] reused") != std::string::npos);
    CHECK(again.str().find("[capture] reused") != std::string::npos);
    CHECK(file_sha256(a.path / "report.adpt") == before);

    // A changed training config invalidates only the training stages.
    RunConfig changed = ca;
    changed.train.epochs = 4;
    std::ostringstream third;
    run_pipeline(changed, &third);
    CHECK(third.str().find("[capture] reused") != std::string::npos);
    CHECK(third.str().find("[finetune] reused") == std::string::npos);

    // Worker count does not change any artifact.
    TempDir w;
    RunConfig cw = small_config(w.path);
    cw.workers = 2;
    run_pipeline(cw);
    CHECK(file_sha256(w.path / "finetuned.adpt") == file_sha256(b.path / "finetuned.adpt"));
}

TEST_CASE("report carries provenance, layers and both distributions") {
    TempDir dir;
    const RunConfig c = small_config(dir.path);
    const Json r = run_pipeline(c);
    CHECK(r["provenance"]["config_hash"] == config_hash(c));
    CHECK(r["provenance"]["source_hash"] == file_sha256(dir.path / "source.adpt"));
    CHECK(r["provenance"]["seed"] == 11);
    CHECK(r["provenance"]["seeds"]["train"] == derive_seeds(11).train);
    REQUIRE(r["layers"].size() == 2);
    for (const auto& l : r["layers"]) {
        CHECK(l["final_objective"].get<double>() <= l["init_objective"].get<double>());
        CHECK(l["history"].size() == 4);
    }
    for (const char* which : {"svd", "finetuned"}) {
        for (const char* set : {"narrow", "broad"}) {
            const Json& e = r[which]["sets"][set];
            CHECK(e["divergence"].get<double>() >= 0.0);
            CHECK(e["agreement"].get<double>() >= 0.0);
            CHECK(e["agreement"].get<double>() <= 1.0);
            CHECK(e["layer_objectives"].size() == 2);
            CHECK_FALSE(e.contains("token_error_rate"));
        }
    }
    CHECK(load_report(dir.path / "report.adpt") == r);
    std::ostringstream text;
    print_report(r, text);
    CHECK(text.str().find("finetuned") != std::string::npos);
}

TEST_CASE("errors name the stage and keep their category") {
    TempDir dir;
    RunConfig c = small_config(dir.path);
    c.source = (dir.path / "missing.adpt").string();
    try {
        run_pipeline(c);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.category() == ErrorCategory::Io);
        CHECK(std::string(e.what()).find("stage source") != std::string::npos);
    }
    run_pipeline(small_config(dir.path / "ok"));
    c.source = (dir.path / "ok" / "pairs" / "layer0.adpt").string();  // not a model checkpoint
    try {
        run_pipeline(c);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.category() == ErrorCategory::Format);
    }
}

TEST_CASE("trained toy sources report token error rates") {
    TempDir dir;
    RunConfig c = small_config(dir.path);
    const Model init = gen_toy(c.dims, {}, 3);
    ToyTrainConfig t;
    t.steps = 40;
    t.lr = 3e-3;
    t.eval_count = 20;
    const ToyTrainResult trained = train_toy(init, t);
    SaveOptions o;
    o.provenance = {{"task", "copy"}};
    save_checkpoint(trained.model, dir.path / "trained.adpt", o);
    c.source = (dir.path / "trained.adpt").string();
    c.work_dir = dir.path / "run";
    const Json r = run_pipeline(c);
    CHECK(r["task"] == "copy");
    const Json& e = r["finetuned"]["sets"]["broad"];
    CHECK(e["token_error_rate"].get<double>() >= 0.0);
    CHECK(e["token_error_rate"].get<double>() <= 2.0);
    // The reference rate is that of the source model itself.
    const auto inputs = make_eval_set(trained.model, broad_distribution(c.dims), c.eval_samples,
                                      layer_seed(derive_seeds(11).eval, 1))
                            .inputs;
    CHECK(e["reference_token_error_rate"].get<double>() ==
          doctest::Approx(token_error_rate(trained.model, ToyTask::Copy, inputs)));
}

TEST_CASE("mixed predictions match the source when nothing is compressed") {
    ModelDims d;
    d.d_model = 16;
    d.heads = 2;
    d.head_dim = 8;
    d.d_ff = 32;
    d.n_layers = 2;
    d.vocab = 12;
    const Model m = gen_toy(d, {}, 4);
    const MixedModel mm = make_mixed(m);
    const auto seqs = sample_sequences(broad_distribution(d), 10, 5);
    for (const auto& s : seqs) {
        CHECK(mixed_predict(mm, s) == predict(m, s));
    }
    CHECK(mixed_token_error_rate(mm, ToyTask::Reverse, seqs) == doctest::Approx(token_error_rate(m, ToyTask::Reverse, seqs)));
}

TEST_CASE("sweep curves start at zero and share parameter accounting") {
    TempDir dir;
    const RunConfig c = small_config(dir.path);
    const Json s = run_sweep(c);
    const Json& pts = s["successive"]["points"];
    REQUIRE(pts.size() == 3);
    CHECK(pts[0]["narrow"]["divergence"] == 0.0);
    CHECK(pts[0]["broad"]["agreement"] == 1.0);
    for (std::size_t k = 1; k < pts.size(); ++k) {
        CHECK(pts[k]["retained_fraction"].get<double>() < pts[k - 1]["retained_fraction"].get<double>());
    }
    const Json& ranks = s["rank_sweep"]["points"];
    REQUIRE(ranks.size() == 2);
    CHECK(ranks[0]["quantized"] == false);
    CHECK(ranks[1]["quantized"] == true);
    CHECK(ranks[0]["retained_fraction"] == ranks[1]["retained_fraction"]);
    CHECK(ranks[1]["byte_fraction"].get<double>() < ranks[0]["byte_fraction"].get<double>());
    CHECK(load_report(dir.path / "sweep.adpt") == s);
    CHECK(run_sweep(c) == s);
}

TEST_CASE("rank sweep divergence rises at very low attention rank") {
    TempDir dir;
    RunConfig c;
    c.dims.d_model = 64;
    c.dims.heads = 2;
    c.dims.head_dim = 32;
    c.dims.d_ff = 128;
    c.dims.n_layers = 1;
    c.dims.vocab = 16;
    c.seed = 2;
    c.work_dir = dir.path;
    c.capture_samples = 16;
    c.eval_samples = 16;
    c.attn_ratio = 1.0;
    c.sweep.targets = {0.45, 0.85};
    c.sweep.finetune = false;
    const Model m = gen_toy(c.dims, {}, 9, false, 1.0);
    const EvalSet sets[] = {make_eval_set(m, narrow_distribution(c.dims), 16, 1),
                            make_eval_set(m, broad_distribution(c.dims), 16, 2)};
    const auto pairs = capture_all_hidden_states(m, sample_sequences(narrow_distribution(c.dims), 16, 3));
    const Json r = rank_sweep(m, pairs, c, sets);
    const Json& pts = r["points"];
    REQUIRE(pts.size() == 4);
    const Json& half = pts[0];
    const Json& low = pts[2];
    CHECK(half["attn_fraction"].get<double>() >= 0.5);
    CHECK(low["attn_fraction"].get<double>() < 0.3);
    for (const char* set : {"narrow", "broad"}) {
        CHECK(low[set]["divergence"].get<double>() > half[set]["divergence"].get<double>());
        CHECK(pts[3][set]["divergence"].get<double>() > pts[1][set]["divergence"].get<double>());
    }
}

}  // TEST_SUITE
