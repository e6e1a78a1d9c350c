// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "adaptwin/errors.hpp"
#include "adaptwin/quant.hpp"
#include "adaptwin/store.hpp"
#include "adaptwin/toy.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace adaptwin;
namespace fs = std::filesystem;

namespace {

ModelDims tiny() {
    ModelDims d;
    d.d_model = 8;
    d.heads = 2;
    d.head_dim = 4;
    d.d_ff = 16;
    d.n_layers = 2;
    d.vocab = 10;
    return d;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("adaptwin_store_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    fs::path operator/(const std::string& name) const { return path / name; }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::uint64_t header_len(const std::string& bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    }
    return v;
}

FormatFault fault_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const FormatError& e) {
        return e.fault();
    }
    FAIL("expected a format error");
    return FormatFault::Schema;
}

MixedModel sample_mixed(const Model& m) {
    MixedModel mm = make_mixed(m);
    mm.source_hash = "abc";
    mm.seed = 17;
    mm.compressed[0] = compress_layer(m.layers[0], m.dims, m.config, {2, 1, 4, 1}, {InitStrategy::Svd, 3, 0.0});
    mm.compressed[1] = quantize_layer(
        compress_layer(m.layers[1], m.dims, m.config, {3, 1, 5, 2}, {InitStrategy::Svd, 4, 0.0}));
    mm.active[1] = SlotKind::Compressed;
    return mm;
}

}  // namespace

TEST_SUITE("store") {

TEST_CASE("model checkpoints round-trip bit for bit") {
    TempDir dir;
    const Model m = gen_toy(tiny(), {}, 1, true);
    save_checkpoint(m, dir / "a.adpt");
    const Model back = load_model(dir / "a.adpt");
    CHECK(back == m);
    for (const auto& s : sample_sequences(broad_distribution(m.dims), 5, 2)) {
        CHECK(model_forward(back, s) == model_forward(m, s));
    }
    save_checkpoint(back, dir / "b.adpt");
    CHECK(slurp(dir / "a.adpt") == slurp(dir / "b.adpt"));
    CHECK(file_sha256(dir / "a.adpt") == sha256_hex(slurp(dir / "a.adpt")));
    CHECK(read_header(dir / "a.adpt")["kind"] == "model");
}

TEST_CASE("models without layers round-trip") {
    TempDir dir;
    ModelDims d = tiny();
    d.n_layers = 0;
    const Model m = gen_toy(d, {}, 2);
    save_checkpoint(m, dir / "e.adpt");
    CHECK(load_model(dir / "e.adpt") == m);
}

TEST_CASE("golden checkpoint is stable") {
    const fs::path golden = fs::path(ADAPTWIN_GOLDEN_DIR) / "tiny_model.adpt";
    TempDir dir;
    save_checkpoint(gen_toy(tiny(), {}, 20260101), dir / "g.adpt");
    REQUIRE(fs::exists(golden));
    CHECK(slurp(dir / "g.adpt") == slurp(golden));
    CHECK(load_model(golden) == gen_toy(tiny(), {}, 20260101));
}

TEST_CASE("f32 storage of f64 weights stays within single precision") {
    TempDir dir;
    std::mt19937_64 rng(3);
    Model m = gen_toy(tiny(), {}, 3);
    for (auto& l : m.layers) {
        l.w_1 = testutil::gaussian(l.w_1.rows(), l.w_1.cols(), rng, 0.3);
    }
    save_checkpoint(m, dir / "f.adpt");
    const Model back = load_model(dir / "f.adpt");
    Model truncated = m;
    for (auto& l : truncated.layers) {
        l.w_1 = round_to_f32(l.w_1);
    }
    CHECK(back == truncated);
    for (const auto& s : sample_sequences(broad_distribution(m.dims), 5, 4)) {
        CHECK(testutil::rel_err(model_forward(back, s), model_forward(m, s)) <= 1e-5);
    }
    SaveOptions exact;
    exact.float_dtype = Dtype::F64;
    save_checkpoint(m, dir / "d.adpt", exact);
    CHECK(load_model(dir / "d.adpt") == m);
}

TEST_CASE("mixed checkpoints keep slots, ranks and int8 factors") {
    TempDir dir;
    const Model m = gen_toy(tiny(), {}, 5);
    const MixedModel mm = sample_mixed(m);
    SaveOptions exact;
    exact.float_dtype = Dtype::F64;
    exact.provenance = {{"config_hash", "xyz"}};
    save_checkpoint(mm, dir / "m.adpt", exact);
    const MixedModel back = load_mixed(dir / "m.adpt");
    CHECK(back == mm);
    save_checkpoint(back, dir / "m2.adpt", exact);
    CHECK(slurp(dir / "m.adpt") == slurp(dir / "m2.adpt"));
    const Json h = read_header(dir / "m.adpt");
    CHECK(h["provenance"]["config_hash"] == "xyz");
    CHECK(h["seeds"]["train"] == 17);
    // The quantized slot is stored as int8, so the file is smaller than all-f64.
    MixedModel unq = mm;
    unq.compressed[1]->quantized = false;
    save_checkpoint(unq, dir / "u.adpt", exact);
    CHECK(fs::file_size(dir / "m.adpt") < fs::file_size(dir / "u.adpt"));
    // A plain model loads as a mixed model with no compressed slots.
    save_checkpoint(m, dir / "p.adpt");
    const MixedModel plain = load_mixed(dir / "p.adpt");
    CHECK(plain.base == m);
    CHECK(plain.active_compressed() == 0);
    CHECK_THROWS_AS(load_model(dir / "m.adpt"), FormatError);
}

TEST_CASE("zero-width LoRA factors keep their shape") {
    TempDir dir;
    const Model m = gen_toy(tiny(), {}, 8);
    MixedModel mm = make_mixed(m);
    mm.compressed[0] = compress_layer(m.layers[0], m.dims, m.config, {4, 0, 8, 0}, {InitStrategy::Svd, 1, 0.0});
    mm.compressed[1] = quantize_layer(*mm.compressed[0]);
    REQUIRE(mm.compressed[0]->ff_1.a.rows() == 16);
    REQUIRE(mm.compressed[0]->ff_1.a.cols() == 0);
    SaveOptions exact;
    exact.float_dtype = Dtype::F64;
    save_checkpoint(mm, dir / "z.adpt", exact);
    CHECK(load_mixed(dir / "z.adpt") == mm);
}

TEST_CASE("structural faults are typed") {
    TempDir dir;
    save_checkpoint(gen_toy(tiny(), {}, 6), dir / "c.adpt");
    const std::string good = slurp(dir / "c.adpt");
    const std::size_t first = 16 + header_len(good);

    std::string bad = good;
    bad[0] = 'X';
    CHECK(fault_of([&] { decode_model(bad); }) == FormatFault::BadMagic);

    bad = good;
    bad[4] = 2;
    CHECK(fault_of([&] { decode_model(bad); }) == FormatFault::UnsupportedVersion);

    bad = good;
    bad[16] = '[';
    CHECK(fault_of([&] { decode_model(bad); }) == FormatFault::BadHeader);

    // First record: "token_embedding", dtype byte after the name.
    bad = good;
    bad[first + 4 + std::strlen("token_embedding")] = 7;
    CHECK(fault_of([&] { decode_model(bad); }) == FormatFault::UnknownDtype);

    bad = good;
    bad[first + 4 + std::strlen("token_embedding") + 1 + 4 + 16] ^= 1;  // payload length
    CHECK(fault_of([&] { decode_model(bad); }) == FormatFault::LengthMismatch);

    bad = good + "x";
    CHECK(fault_of([&] { decode_model(bad); }) == FormatFault::LengthMismatch);

    bad = good;
    bad[bad.size() - 3] ^= 0x10;
    CHECK(fault_of([&] { decode_model(bad); }) == FormatFault::HashMismatch);

    bad = good;
    const auto pos = bad.find("\"causal\":false");
    REQUIRE(pos != std::string::npos);
    bad.replace(pos, 14, "\"causal\":true ");
    CHECK(fault_of([&] { decode_model(bad); }) == FormatFault::HashMismatch);
}

TEST_CASE("truncation names the tensor") {
    TempDir dir;
    save_checkpoint(gen_toy(tiny(), {}, 7), dir / "t.adpt");
    const std::string good = slurp(dir / "t.adpt");
    const std::string cut = good.substr(0, good.size() - 10);
    try {
        decode_model(cut);
        FAIL("expected a format error");
    } catch (const FormatError& e) {
        CHECK(e.fault() == FormatFault::Truncated);
        CHECK(std::string(e.what()).find("layer1/ln_bias") != std::string::npos);
    }
    spit(dir / "t2.adpt", cut);
    CHECK_THROWS_AS(load_model(dir / "t2.adpt"), FormatError);
    CHECK_THROWS_AS(load_model(dir / "missing.adpt"), IoError);
}

TEST_CASE("single-bit payload flips are detected") {
    TempDir dir;
    save_checkpoint(gen_toy(tiny(), {}, 8), dir / "h.adpt");
    const std::string good = slurp(dir / "h.adpt");
    const std::size_t first = 16 + header_len(good);
    std::mt19937_64 rng(9);
    int detected = 0;
    for (int trial = 0; trial < 200; ++trial) {
        std::string bad = good;
        const std::size_t at = first + rng() % (good.size() - first);
        bad[at] ^= static_cast<char>(1u << (rng() % 8));
        try {
            decode_model(bad);
        } catch (const FormatError&) {
            ++detected;
        }
    }
    CHECK(detected == 200);
}

TEST_CASE("fuzzed inputs never crash") {
    TempDir dir;
    const Model m = gen_toy(tiny(), {}, 10);
    save_checkpoint(sample_mixed(m), dir / "m.adpt");
    save_pairs(capture_hidden_states(m, sample_sequences(narrow_distribution(m.dims), 3, 1), 0), dir / "p.adpt");
    const std::string seeds[] = {slurp(dir / "m.adpt"), slurp(dir / "p.adpt")};
    std::mt19937_64 rng(11);
    int typed = 0, loaded = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        std::string bytes = seeds[trial % 2];
        switch (rng() % 5) {
            case 0:  // random byte edits anywhere
                for (int k = 0, n = 1 + static_cast<int>(rng() % 8); k < n; ++k) {
                    bytes[rng() % bytes.size()] = static_cast<char>(rng());
                }
                break;
            case 1:  // truncation
                bytes.resize(rng() % bytes.size());
                break;
            case 2: {  // edits inside the header text
                const std::size_t len = std::min<std::size_t>(header_len(bytes), bytes.size() - 16);
                for (int k = 0; k < 3 && len > 0; ++k) {
                    bytes[16 + rng() % len] = "{}[]\":,0123456789-e.aznul"[rng() % 25];
                }
                break;
            }
            case 3: {  // random header length
                const std::uint64_t v = rng() >> (rng() % 64);
                for (int i = 0; i < 8; ++i) {
                    bytes[8 + i] = static_cast<char>((v >> (8 * i)) & 0xff);
                }
                break;
            }
            default: {  // pure noise after a valid magic
                bytes = "ADPT";
                for (std::size_t k = 0, n = rng() % 512; k < n; ++k) {
                    bytes.push_back(static_cast<char>(rng()));
                }
            }
        }
        try {
            if (trial % 2 == 0) {
                decode_mixed(bytes);
            } else {
                decode_pairs(bytes);
            }
            ++loaded;
        } catch (const FormatError&) {
            ++typed;
        }
    }
    CHECK(typed + loaded == 10000);
    CHECK(typed > 9000);
}

TEST_CASE("pair sets round-trip and reject width mismatches") {
    TempDir dir;
    const Model m = gen_toy(tiny(), {}, 12);
    auto pairs = capture_hidden_states(m, sample_sequences(narrow_distribution(m.dims), 6, 13), 1);
    pairs.source_hash = "deadbeef";
    pairs.distribution = "narrow";
    SaveOptions exact;
    exact.float_dtype = Dtype::F64;
    save_pairs(pairs, dir / "p.adpt", exact);
    const auto back = load_pairs(dir / "p.adpt");
    CHECK(back.pairs == pairs.pairs);
    CHECK(back.layer_index == 1);
    CHECK(back.source_hash == "deadbeef");
    CHECK(back.distribution == "narrow");
    CHECK(back.dims == pairs.dims);
    save_pairs(back, dir / "p2.adpt", exact);
    CHECK(slurp(dir / "p.adpt") == slurp(dir / "p2.adpt"));

    save_pairs(pairs, dir / "f.adpt");
    const auto f32 = load_pairs(dir / "f.adpt");
    for (std::size_t k = 0; k < pairs.pairs.size(); ++k) {
        CHECK(f32.pairs[k].input == round_to_f32(pairs.pairs[k].input));
    }

    std::string bytes = slurp(dir / "p.adpt");
    const auto pos = bytes.find("\"d_model\":8");
    REQUIRE(pos != std::string::npos);
    bytes.replace(pos, 11, "\"d_model\":4");
    const auto hd = bytes.find("\"head_dim\":4");
    REQUIRE(hd != std::string::npos);
    bytes.replace(hd, 12, "\"head_dim\":2");
    CHECK(fault_of([&] { decode_pairs(bytes); }) == FormatFault::Schema);

    PairSetWriter w(dir / "w.adpt", {0, m.dims, "", "", false});
    CHECK_THROWS_AS(w.write({Matrix(3, 4), Matrix(3, 4)}), InputError);
}

TEST_CASE("3000-sample pair sets stream") {
    TempDir dir;
    const Model m = gen_toy(tiny(), {}, 14);
    const auto dist = narrow_distribution(m.dims);
    {
        PairSetWriter w(dir / "big.adpt", {0, m.dims, "src", dist.name, false});
        for (std::size_t chunk = 0; chunk < 30; ++chunk) {
            const auto part = capture_hidden_states(m, sample_sequences(dist, 100, 100 + chunk), 0);
            for (const auto& p : part.pairs) {
                w.write(p);
            }
        }
        w.finish();
        CHECK(w.count() == 3000);
    }
    CHECK_FALSE(fs::exists(dir.path / "big.adpt.records.tmp"));
    PairSetReader r(dir / "big.adpt");
    CHECK(r.size() == 3000);
    std::size_t n = 0;
    HiddenStatePair p;
    const auto first = capture_hidden_states(m, sample_sequences(dist, 1, 100), 0);
    while (r.next(p)) {
        if (n == 0) {
            CHECK(p.input == round_to_f32(first.pairs[0].input));
        }
        CHECK(p.input.cols() == m.dims.d_model);
        ++n;
    }
    CHECK(n == 3000);
}

TEST_CASE("unfinished writers leave no file") {
    TempDir dir;
    const Model m = gen_toy(tiny(), {}, 15);
    {
        PairSetWriter w(dir / "x.adpt", {0, m.dims, "", "", false});
        w.write({Matrix(2, 8), Matrix(2, 8)});
    }
    CHECK_FALSE(fs::exists(dir / "x.adpt"));
    CHECK(fs::is_empty(dir.path));
}

TEST_CASE("reports round-trip") {
    TempDir dir;
    const Json rep = {{"divergence", 0.25}, {"layers", {1, 2, 3}}, {"name", "sweep"}};
    save_report(rep, dir / "r.adpt");
    CHECK(load_report(dir / "r.adpt") == rep);
    CHECK_THROWS_AS(load_model(dir / "r.adpt"), FormatError);
}

TEST_CASE("structured-text conversions") {
    const ModelDims d = tiny();
    CHECK(dims_from_json(to_json(d)) == d);
    LayerConfig c;
    c.activation = Activation::Relu;
    c.ff_residual_pre_ln = true;
    CHECK(layer_config_from_json(to_json(c)) == c);
    const auto plan = CompressionPlan::uniform(3, {2, 1, 4, 1}, true);
    CHECK(compression_plan_from_json(to_json(plan)) == plan);
    TrainConfig t;
    t.mode = TrainMode::LoraOnly;
    t.lr = 3e-4;
    t.seed = 99;
    const TrainConfig t2 = train_config_from_json(to_json(t));
    CHECK(t2.mode == t.mode);
    CHECK(t2.lr == t.lr);
    CHECK(t2.seed == t.seed);
    CHECK_THROWS_AS(dims_from_json({{"d_model", 8}, {"width", 3}}), ConfigError);
    CHECK_THROWS_AS(rank_plan_from_json({{"attn_rank", -1}, {"attn_lora", 0}, {"ff_rank", 1}, {"ff_lora", 0}}),
                    ConfigError);
    CHECK_THROWS_AS(train_config_from_json({{"lr", "fast"}}), ConfigError);
    CHECK(train_config_from_json({{"epochs", 3}}).lr == TrainConfig{}.lr);
}

}  // TEST_SUITE
