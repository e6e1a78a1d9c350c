// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "adaptwin/assemble.hpp"
#include "adaptwin/compress.hpp"
#include "adaptwin/finetune.hpp"
#include "adaptwin/model.hpp"
#include "json.hpp"

// Container layout (all integers little-endian):
//
//   "ADPT"  u32 version  u64 header_len  header (JSON, UTF-8)
//   record*: u32 name_len, name, u8 dtype, u32 rank, u64 dim[rank],
//            u64 payload_len, payload, [f32 scale per row when dtype is i8]
//
// The header lists every record name in order and carries content_hash, the
// SHA-256 of the header (content_hash removed, canonical dump) followed by the
// SHA-256 of the record bytes.

namespace adaptwin {

using Json = nlohmann::json;

inline constexpr std::uint32_t kFormatVersion = 1;

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1, I8 = 2 };

struct SaveOptions {
    /// On-disk precision of floating tensors. Quantized factors are always int8.
    Dtype float_dtype = Dtype::F32;
    /// Merged into the header's provenance object.
    Json provenance = Json::object();
};

// Structured-text conversions. Readers reject unknown keys with ConfigError.
Json to_json(const ModelDims& d);
Json to_json(const LayerConfig& c);
Json to_json(const RankPlan& p);
Json to_json(const CompressionPlan& p);
Json to_json(const TrainConfig& t);
Json to_json(const SizeReport& r);
ModelDims dims_from_json(const Json& j);
LayerConfig layer_config_from_json(const Json& j);
RankPlan rank_plan_from_json(const Json& j);
CompressionPlan compression_plan_from_json(const Json& j);
/// Fields absent from `j` keep the values in `base`.
TrainConfig train_config_from_json(const Json& j, TrainConfig base = {});

/// Throws ConfigError naming the first key of `j` not in `allowed`.
void reject_unknown_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where);

void save_checkpoint(const Model& m, const std::filesystem::path& path, const SaveOptions& opts = {});
void save_checkpoint(const MixedModel& m, const std::filesystem::path& path, const SaveOptions& opts = {});

/// Loads a plain model checkpoint. FormatError on any structural problem.
Model load_model(const std::filesystem::path& path);
/// Loads a mixed checkpoint; a plain model checkpoint loads with no compressed slots.
MixedModel load_mixed(const std::filesystem::path& path);

/// In-memory variants of the loaders (same checks).
Model decode_model(const std::string& bytes);
MixedModel decode_mixed(const std::string& bytes);

/// The verified header of any container file.
Json read_header(const std::filesystem::path& path);

/// SHA-256 of the file bytes, lowercase hex.
std::string file_sha256(const std::filesystem::path& path);
std::string sha256_hex(const std::string& bytes);

struct PairSetMeta {
    std::size_t layer_index = 0;
    ModelDims dims;
    std::string source_hash;
    std::string distribution;
    bool causal = false;
};

/// Streams pairs to disk; memory use does not grow with the number of samples.
/// The file appears at `path` only after finish().
class PairSetWriter {
public:
    PairSetWriter(std::filesystem::path path, PairSetMeta meta, const SaveOptions& opts = {});
    ~PairSetWriter();
    PairSetWriter(const PairSetWriter&) = delete;
    PairSetWriter& operator=(const PairSetWriter&) = delete;

    /// Throws InputError when the pair's width or row counts do not match.
    void write(const HiddenStatePair& pair);
    void finish();
    std::size_t count() const noexcept { return count_; }

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    std::filesystem::path path_;
    PairSetMeta meta_;
    SaveOptions opts_;
    std::size_t count_ = 0;
    bool finished_ = false;
};

/// Reads pairs one at a time. The content hash is checked when the last pair
/// is read, so corruption surfaces as a FormatError from next().
class PairSetReader {
public:
    explicit PairSetReader(const std::filesystem::path& path);
    explicit PairSetReader(std::unique_ptr<std::istream> in);
    ~PairSetReader();
    PairSetReader(const PairSetReader&) = delete;
    PairSetReader& operator=(const PairSetReader&) = delete;

    const PairSetMeta& meta() const noexcept { return meta_; }
    std::size_t size() const noexcept { return size_; }
    /// False once every pair has been returned.
    bool next(HiddenStatePair& out);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    PairSetMeta meta_;
    std::size_t size_ = 0;
};

void save_pairs(const HiddenStatePairSet& pairs, const std::filesystem::path& path, const SaveOptions& opts = {});
HiddenStatePairSet load_pairs(const std::filesystem::path& path);
HiddenStatePairSet decode_pairs(const std::string& bytes);

/// Reports are containers whose header holds the report under "report".
void save_report(const Json& report, const std::filesystem::path& path);
Json load_report(const std::filesystem::path& path);

}  // namespace adaptwin
