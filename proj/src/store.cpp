// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

#include "adaptwin/store.hpp"

#include <openssl/evp.h>

#include <array>
#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <sstream>

#include "adaptwin/errors.hpp"
#include "adaptwin/quant.hpp"

namespace adaptwin {

// ---------------------------------------------------------------------------
// Structured-text conversions

void reject_unknown_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) {
        throw ConfigError(where + " must be an object");
    }
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed) {
            known = known || key == a;
        }
        if (!known) {
            throw ConfigError("unknown key '" + key + "' in " + where);
        }
    }
}

namespace {

bool nonnegative_integer(const Json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

std::size_t get_size(const Json& j, const char* key, const std::string& where) {
    const auto it = j.find(key);
    if (it == j.end() || !nonnegative_integer(*it)) {
        throw ConfigError(where + "." + key + " must be a nonnegative integer");
    }
    return it->get<std::size_t>();
}

template <class T>
void maybe(const Json& j, const char* key, T& out, const std::string& where) {
    const auto it = j.find(key);
    if (it == j.end()) {
        return;
    }
    try {
        if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
            if (!nonnegative_integer(*it)) {
                throw ConfigError(where + "." + key + " must be a nonnegative integer");
            }
        } else if constexpr (std::is_same_v<T, double>) {
            if (!it->is_number()) {
                throw ConfigError(where + "." + key + " must be a number");
            }
        } else if constexpr (std::is_same_v<T, bool>) {
            if (!it->is_boolean()) {
                throw ConfigError(where + "." + key + " must be true or false");
            }
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!it->is_string()) {
                throw ConfigError(where + "." + key + " must be a string");
            }
        }
        out = it->get<T>();
    } catch (const Json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

}  // namespace

Json to_json(const ModelDims& d) {
    return {{"d_model", d.d_model}, {"heads", d.heads},       {"head_dim", d.head_dim},
            {"d_ff", d.d_ff},       {"n_layers", d.n_layers}, {"vocab", d.vocab}};
}

ModelDims dims_from_json(const Json& j) {
    reject_unknown_keys(j, {"d_model", "heads", "head_dim", "d_ff", "n_layers", "vocab"}, "dims");
    ModelDims d;
    maybe(j, "d_model", d.d_model, "dims");
    maybe(j, "heads", d.heads, "dims");
    maybe(j, "head_dim", d.head_dim, "dims");
    maybe(j, "d_ff", d.d_ff, "dims");
    maybe(j, "n_layers", d.n_layers, "dims");
    maybe(j, "vocab", d.vocab, "dims");
    return d;
}

Json to_json(const LayerConfig& c) {
    return {{"activation", to_string(c.activation)},
            {"ff_residual_pre_ln", c.ff_residual_pre_ln},
            {"ln_eps", c.ln_eps}};
}

LayerConfig layer_config_from_json(const Json& j) {
    reject_unknown_keys(j, {"activation", "ff_residual_pre_ln", "ln_eps"}, "layer_config");
    LayerConfig c;
    std::string act = to_string(c.activation);
    maybe(j, "activation", act, "layer_config");
    c.activation = parse_activation(act);
    maybe(j, "ff_residual_pre_ln", c.ff_residual_pre_ln, "layer_config");
    maybe(j, "ln_eps", c.ln_eps, "layer_config");
    if (!(c.ln_eps > 0.0) || !std::isfinite(c.ln_eps)) {
        throw ConfigError("layer_config.ln_eps must be positive");
    }
    return c;
}

Json to_json(const RankPlan& p) {
    return {{"attn_rank", p.attn_rank}, {"attn_lora", p.attn_lora}, {"ff_rank", p.ff_rank}, {"ff_lora", p.ff_lora}};
}

RankPlan rank_plan_from_json(const Json& j) {
    reject_unknown_keys(j, {"attn_rank", "attn_lora", "ff_rank", "ff_lora"}, "ranks");
    return {get_size(j, "attn_rank", "ranks"), get_size(j, "attn_lora", "ranks"), get_size(j, "ff_rank", "ranks"),
            get_size(j, "ff_lora", "ranks")};
}

Json to_json(const CompressionPlan& p) {
    Json layers = Json::array();
    for (const auto& l : p.layers) {
        layers.push_back({{"ranks", l.ranks ? to_json(*l.ranks) : Json(nullptr)}, {"quantize", l.quantize}});
    }
    return {{"layers", layers}};
}

CompressionPlan compression_plan_from_json(const Json& j) {
    reject_unknown_keys(j, {"layers"}, "plan");
    const auto it = j.find("layers");
    if (it == j.end() || !it->is_array()) {
        throw ConfigError("plan.layers must be an array");
    }
    CompressionPlan p;
    for (const auto& l : *it) {
        reject_unknown_keys(l, {"ranks", "quantize"}, "plan layer");
        LayerPlan lp;
        if (l.contains("ranks") && !l["ranks"].is_null()) {
            lp.ranks = rank_plan_from_json(l["ranks"]);
        }
        maybe(l, "quantize", lp.quantize, "plan layer");
        p.layers.push_back(lp);
    }
    return p;
}

Json to_json(const TrainConfig& t) {
    return {{"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"lr", t.lr},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"eps", t.eps},
            {"mode", to_string(t.mode)},
            {"seed", t.seed},
            {"quantization_aware", t.quantization_aware},
            {"throw_on_divergence", t.throw_on_divergence}};
}

TrainConfig train_config_from_json(const Json& j, TrainConfig t) {
    reject_unknown_keys(j,
                        {"epochs", "batch_size", "lr", "beta1", "beta2", "eps", "mode", "seed", "quantization_aware",
                         "throw_on_divergence"},
                        "train");
    maybe(j, "epochs", t.epochs, "train");
    maybe(j, "batch_size", t.batch_size, "train");
    maybe(j, "lr", t.lr, "train");
    maybe(j, "beta1", t.beta1, "train");
    maybe(j, "beta2", t.beta2, "train");
    maybe(j, "eps", t.eps, "train");
    std::string mode = to_string(t.mode);
    maybe(j, "mode", mode, "train");
    t.mode = parse_train_mode(mode);
    maybe(j, "seed", t.seed, "train");
    maybe(j, "quantization_aware", t.quantization_aware, "train");
    maybe(j, "throw_on_divergence", t.throw_on_divergence, "train");
    return t;
}

Json to_json(const SizeReport& r) {
    Json layers = Json::array();
    for (const auto& l : r.layers) {
        layers.push_back({{"compressed", l.compressed},
                          {"quantized", l.quantized},
                          {"original_weights", l.original_weights},
                          {"weights", l.weights},
                          {"original_bytes", l.original_bytes},
                          {"bytes", l.bytes},
                          {"retained", l.retained()}});
    }
    return {{"baseline_bits", r.baseline_bits},
            {"original_weights", r.original_weights},
            {"weights", r.weights},
            {"original_bytes", r.original_bytes},
            {"bytes", r.bytes},
            {"retained_fraction", r.retained_fraction},
            {"removed_fraction", r.removed_fraction},
            {"attn_retained", r.attn_retained},
            {"ff_retained", r.ff_retained},
            {"byte_fraction", r.byte_fraction},
            {"nominal_byte_fraction", r.nominal_byte_fraction},
            {"layers", layers}};
}

// ---------------------------------------------------------------------------
// Container primitives

namespace {

constexpr char kMagic[4] = {'A', 'D', 'P', 'T'};
constexpr std::size_t kMaxName = 4096;
constexpr std::size_t kMaxRank = 8;

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
            throw IoError("cannot initialize SHA-256");
        }
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }
    void update(const std::string& s) { update(s.data(), s.size()); }

    std::string digest() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, out.data(), &len);
        return std::string(reinterpret_cast<const char*>(out.data()), len);
    }

private:
    EVP_MD_CTX* ctx_;
};

std::string to_hex(const std::string& raw) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned char c : raw) {
        out.push_back(digits[c >> 4]);
        out.push_back(digits[c & 15]);
    }
    return out;
}

void put_u8(std::string& s, std::uint8_t v) { s.push_back(static_cast<char>(v)); }

void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_u64(std::string& s, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        s.push_back(static_cast<char>((v >> (8 * i)) & 0xffULL));
    }
}

std::uint32_t get_u32(const char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    }
    return v;
}

std::uint64_t get_u64(const char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    }
    return v;
}

std::size_t dtype_size(Dtype t) { return t == Dtype::F64 ? 8 : t == Dtype::F32 ? 4 : 1; }

bool representable_int8(const Matrix& m) { return m.all_finite() && fake_quantize(m) == m; }

std::string encode_record(const std::string& name, const Matrix& m, Dtype dt) {
    std::string s;
    put_u32(s, static_cast<std::uint32_t>(name.size()));
    s += name;
    put_u8(s, static_cast<std::uint8_t>(dt));
    put_u32(s, 2);
    put_u64(s, m.rows());
    put_u64(s, m.cols());
    put_u64(s, static_cast<std::uint64_t>(m.size() * dtype_size(dt)));
    switch (dt) {
        case Dtype::F32:
            for (double v : m.values()) {
                const float f = static_cast<float>(v);
                std::uint32_t bits;
                std::memcpy(&bits, &f, 4);
                put_u32(s, bits);
            }
            break;
        case Dtype::F64:
            for (double v : m.values()) {
                std::uint64_t bits;
                std::memcpy(&bits, &v, 8);
                put_u64(s, bits);
            }
            break;
        case Dtype::I8: {
            const QuantizedTensor q = quantize(m);
            for (std::int8_t c : q.codes) {
                put_u8(s, static_cast<std::uint8_t>(c));
            }
            for (float f : q.scales) {
                std::uint32_t bits;
                std::memcpy(&bits, &f, 4);
                put_u32(s, bits);
            }
            break;
        }
    }
    return s;
}

/// Record bytes in order plus the names they carry.
struct Body {
    std::string bytes;
    std::vector<std::string> names;

    /// Absent tensors (0×0) are skipped; a zero-width factor keeps its shape.
    void add(const std::string& name, const Matrix& m, Dtype dt) {
        if (m.rows() == 0 && m.cols() == 0) {
            return;
        }
        if (m.empty() && dt == Dtype::I8) {
            dt = Dtype::F32;
        }
        bytes += encode_record(name, m, dt);
        names.push_back(name);
    }
};

std::string content_hash(Json header, const std::string& records_digest) {
    header.erase("content_hash");
    Sha256 h;
    h.update(header.dump());
    h.update(records_digest);
    return to_hex(h.digest());
}

std::string prefix(const Json& header) {
    const std::string text = header.dump();
    std::string s(kMagic, 4);
    put_u32(s, kFormatVersion);
    put_u64(s, text.size());
    return s + text;
}

std::string assemble(Json header, const Body& body) {
    header["tensors"] = body.names;
    Sha256 h;
    h.update(body.bytes);
    header["content_hash"] = content_hash(header, h.digest());
    return prefix(header) + body.bytes;
}

void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open '" + tmp.string() + "' for writing");
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw IoError("write to '" + tmp.string() + "' failed");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
    }
}

std::unique_ptr<std::istream> open_input(const std::filesystem::path& path) {
    auto in = std::make_unique<std::ifstream>(path, std::ios::binary);
    if (!*in) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    return in;
}

/// Bounded reader: never reads or allocates past the end of the stream.
class Source {
public:
    explicit Source(std::istream& in) : in_(in) {
        in_.seekg(0, std::ios::end);
        const auto end = in_.tellg();
        in_.seekg(0, std::ios::beg);
        if (end < 0 || !in_) {
            throw IoError("input is not seekable");
        }
        remaining_ = static_cast<std::uint64_t>(end);
    }

    std::uint64_t remaining() const noexcept { return remaining_; }

    std::string read(std::uint64_t n, const std::string& what) {
        if (n > remaining_) {
            throw FormatError(FormatFault::Truncated, what + " needs " + std::to_string(n) + " bytes, " +
                                                          std::to_string(remaining_) + " left");
        }
        std::string s(static_cast<std::size_t>(n), '\0');
        in_.read(s.data(), static_cast<std::streamsize>(n));
        if (!in_) {
            throw IoError("read failed while reading " + what);
        }
        remaining_ -= n;
        return s;
    }

private:
    std::istream& in_;
    std::uint64_t remaining_ = 0;
};

struct Record {
    std::string name;
    Dtype dtype = Dtype::F32;
    Matrix value;
};

Record read_record(Source& src, Sha256& hash) {
    Record r;
    std::string raw = src.read(4, "tensor name length");
    const std::uint32_t name_len = get_u32(raw.data());
    if (name_len == 0 || name_len > kMaxName) {
        throw FormatError(FormatFault::Schema, "tensor name length " + std::to_string(name_len) + " out of range");
    }
    hash.update(raw);
    r.name = src.read(name_len, "tensor name");
    hash.update(r.name);
    const std::string where = "tensor '" + r.name + "'";

    raw = src.read(5, where + " dtype and rank");
    hash.update(raw);
    const auto tag = static_cast<std::uint8_t>(raw[0]);
    if (tag > 2) {
        throw FormatError(FormatFault::UnknownDtype, where + " has dtype tag " + std::to_string(tag));
    }
    r.dtype = static_cast<Dtype>(tag);
    const std::uint32_t rank = get_u32(raw.data() + 1);
    if (rank > kMaxRank) {
        throw FormatError(FormatFault::Schema, where + " has rank " + std::to_string(rank));
    }
    raw = src.read(8ULL * rank, where + " shape");
    hash.update(raw);
    std::vector<std::uint64_t> dims(rank);
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        dims[i] = get_u64(raw.data() + 8 * i);
        if (dims[i] != 0 && count > (std::uint64_t{1} << 62) / dims[i]) {
            throw FormatError(FormatFault::LengthMismatch, where + " shape overflows");
        }
        count *= dims[i];
    }
    raw = src.read(8, where + " payload length");
    hash.update(raw);
    const std::uint64_t payload_len = get_u64(raw.data());
    const std::uint64_t expected = count * dtype_size(r.dtype);
    if (payload_len != expected) {
        throw FormatError(FormatFault::LengthMismatch, where + " declares " + std::to_string(payload_len) +
                                                           " payload bytes, shape and dtype need " +
                                                           std::to_string(expected));
    }
    if (rank != 2) {
        throw FormatError(FormatFault::Schema, where + " must be a matrix, has rank " + std::to_string(rank));
    }
    const std::string payload = src.read(payload_len, where + " payload");
    hash.update(payload);
    const std::size_t rows = static_cast<std::size_t>(dims[0]);
    const std::size_t cols = static_cast<std::size_t>(dims[1]);
    r.value = Matrix(rows, cols);
    auto out = r.value.values();
    switch (r.dtype) {
        case Dtype::F32:
            for (std::size_t i = 0; i < out.size(); ++i) {
                const std::uint32_t bits = get_u32(payload.data() + 4 * i);
                float f;
                std::memcpy(&f, &bits, 4);
                out[i] = f;
            }
            break;
        case Dtype::F64:
            for (std::size_t i = 0; i < out.size(); ++i) {
                const std::uint64_t bits = get_u64(payload.data() + 8 * i);
                std::memcpy(&out[i], &bits, 8);
            }
            break;
        case Dtype::I8: {
            const std::string scales = src.read(4ULL * rows, where + " scales");
            hash.update(scales);
            for (std::size_t row = 0; row < rows; ++row) {
                const std::uint32_t bits = get_u32(scales.data() + 4 * row);
                float s;
                std::memcpy(&s, &bits, 4);
                if (!(s > 0.0f) || !std::isfinite(s)) {
                    throw FormatError(FormatFault::Schema, where + " has an invalid scale in row " +
                                                               std::to_string(row));
                }
                for (std::size_t c = 0; c < cols; ++c) {
                    const auto code = static_cast<std::int8_t>(payload[row * cols + c]);
                    if (code == -128) {
                        throw FormatError(FormatFault::Schema, where + " holds code -128");
                    }
                    out[row * cols + c] = static_cast<double>(code) * static_cast<double>(s);
                }
            }
            break;
        }
    }
    return r;
}

/// Header of a container positioned at the first record.
struct Opened {
    Json header;
    std::vector<std::string> names;
    std::string expected_hash;
};

Opened open_container(Source& src) {
    if (src.read(4, "magic") != std::string(kMagic, 4)) {
        throw FormatError(FormatFault::BadMagic, "not an adaptwin container");
    }
    const std::uint32_t version = get_u32(src.read(4, "version").data());
    if (version != kFormatVersion) {
        throw FormatError(FormatFault::UnsupportedVersion, "format version " + std::to_string(version) +
                                                               ", expected " + std::to_string(kFormatVersion));
    }
    const std::uint64_t len = get_u64(src.read(8, "header length").data());
    const std::string text = src.read(len, "header");
    Opened o;
    try {
        o.header = Json::parse(text);
    } catch (const Json::exception& e) {
        throw FormatError(FormatFault::BadHeader, e.what());
    }
    if (!o.header.is_object()) {
        throw FormatError(FormatFault::BadHeader, "header is not an object");
    }
    const auto hash = o.header.find("content_hash");
    const auto tensors = o.header.find("tensors");
    if (hash == o.header.end() || !hash->is_string() || tensors == o.header.end() || !tensors->is_array()) {
        throw FormatError(FormatFault::Schema, "header lacks content_hash or tensors");
    }
    o.expected_hash = hash->get<std::string>();
    std::set<std::string> seen;
    for (const auto& n : *tensors) {
        if (!n.is_string()) {
            throw FormatError(FormatFault::Schema, "tensor names must be strings");
        }
        if (!seen.insert(n.get<std::string>()).second) {
            throw FormatError(FormatFault::Schema, "tensor '" + n.get<std::string>() + "' listed twice");
        }
        o.names.push_back(n.get<std::string>());
    }
    if (!o.header.contains("kind") || !o.header["kind"].is_string()) {
        throw FormatError(FormatFault::Schema, "header lacks kind");
    }
    return o;
}

void finish_container(Source& src, const Opened& o, Sha256& records) {
    if (src.remaining() != 0) {
        throw FormatError(FormatFault::LengthMismatch,
                          std::to_string(src.remaining()) + " trailing bytes after the last tensor");
    }
    if (content_hash(o.header, records.digest()) != o.expected_hash) {
        throw FormatError(FormatFault::HashMismatch, "content hash does not match");
    }
}

Record expect_record(Source& src, Sha256& hash, const std::string& name) {
    Record r = read_record(src, hash);
    if (r.name != name) {
        throw FormatError(FormatFault::Schema, "found tensor '" + r.name + "' where '" + name + "' was listed");
    }
    return r;
}

/// Whole container with records by name.
struct Loaded {
    Json header;
    std::map<std::string, Record> records;

    const Json& field(const char* key) const {
        const auto it = header.find(key);
        if (it == header.end()) {
            throw FormatError(FormatFault::Schema, std::string("header lacks '") + key + "'");
        }
        return *it;
    }

    Matrix take(const std::string& name) {
        const auto it = records.find(name);
        if (it == records.end()) {
            return {};
        }
        Matrix m = std::move(it->second.value);
        records.erase(it);
        return m;
    }
};

Loaded read_all(std::istream& in) {
    Source src(in);
    const Opened o = open_container(src);
    Sha256 hash;
    Loaded l;
    l.header = o.header;
    for (const auto& name : o.names) {
        Record r = expect_record(src, hash, name);
        l.records.emplace(name, std::move(r));
    }
    finish_container(src, o, hash);
    return l;
}

/// Runs a decoder, turning every failure into a typed error.
template <class F>
auto guarded(F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const FormatError&) {
        throw;
    } catch (const IoError&) {
        throw;
    } catch (const Error& e) {
        throw FormatError(FormatFault::Schema, e.what());
    } catch (const Json::exception& e) {
        throw FormatError(FormatFault::Schema, e.what());
    } catch (const std::bad_alloc&) {
        throw FormatError(FormatFault::Schema, "container too large to decode");
    }
}

// Every tensor slot of a layer, including absent optional ones.
std::vector<std::pair<std::string, Matrix*>> slots(LayerParams& p) {
    return {{"w_q", &p.w_q},         {"w_k", &p.w_k},         {"w_v", &p.w_v},          {"w_o", &p.w_o},
            {"w_1", &p.w_1},         {"w_2", &p.w_2},         {"b_q", &p.b_q},          {"b_v", &p.b_v},
            {"b_o", &p.b_o},         {"b_1", &p.b_1},         {"b_2", &p.b_2},          {"ln_gain", &p.ln_gain},
            {"ln_bias", &p.ln_bias}, {"ln2_gain", &p.ln2_gain}, {"ln2_bias", &p.ln2_bias}};
}

std::vector<std::pair<std::string, Matrix*>> slots(CompressedLayerParams& p) {
    return {{"w_q", &p.w_q},         {"w_k", &p.w_k},         {"w_v", &p.w_v},         {"w_o_t", &p.w_o_t},
            {"qk_bias", &p.qk_bias}, {"ff_1.u", &p.ff_1.u},   {"ff_1.v", &p.ff_1.v},   {"ff_1.a", &p.ff_1.a},
            {"ff_1.b", &p.ff_1.b},   {"ff_2.u", &p.ff_2.u},   {"ff_2.v", &p.ff_2.v},   {"ff_2.a", &p.ff_2.a},
            {"ff_2.b", &p.ff_2.b},   {"b_o", &p.b_o},         {"b_1", &p.b_1},         {"b_2", &p.b_2},
            {"ln_gain", &p.ln_gain}, {"ln_bias", &p.ln_bias}, {"ln2_gain", &p.ln2_gain}, {"ln2_bias", &p.ln2_bias}};
}

bool is_factor(const std::string& name) { return name.rfind("w_", 0) == 0 || name.rfind("ff_", 0) == 0; }

std::string layer_prefix(std::size_t j) { return "layer" + std::to_string(j) + "/"; }

Json base_header(const Model& m, const char* kind, const SaveOptions& opts) {
    Json h;
    h["kind"] = kind;
    h["dims"] = to_json(m.dims);
    h["layer_config"] = to_json(m.config);
    h["causal"] = m.causal;
    h["provenance"] = opts.provenance.is_object() ? opts.provenance : Json::object();
    h["seeds"] = Json::object();
    return h;
}

void add_base(Body& body, const Model& m, Dtype dt) {
    body.add("token_embedding", m.token_embedding, dt);
    body.add("readout", m.readout, dt);
    body.add("readout_bias", m.readout_bias, dt);
    for (std::size_t j = 0; j < m.layers.size(); ++j) {
        LayerParams p = m.layers[j];
        for (auto& [name, t] : slots(p)) {
            body.add(layer_prefix(j) + name, *t, dt);
        }
    }
}

Model decode_base(Loaded& l, Json& slots_out) {
    Model m;
    m.dims = dims_from_json(l.field("dims"));
    m.dims.validate();
    m.config = layer_config_from_json(l.field("layer_config"));
    if (!l.field("causal").is_boolean()) {
        throw FormatError(FormatFault::Schema, "causal must be a boolean");
    }
    m.causal = l.field("causal").get<bool>();
    slots_out = l.field("slots");
    if (!slots_out.is_array() || slots_out.size() != m.dims.n_layers) {
        throw FormatError(FormatFault::Schema, "slots must list one entry per layer");
    }
    m.token_embedding = l.take("token_embedding");
    m.readout = l.take("readout");
    m.readout_bias = l.take("readout_bias");
    m.layers.resize(m.dims.n_layers);
    for (std::size_t j = 0; j < m.dims.n_layers; ++j) {
        for (auto& [name, t] : slots(m.layers[j])) {
            *t = l.take(layer_prefix(j) + name);
        }
    }
    m.validate();
    return m;
}

void expect_kind(const Loaded& l, std::initializer_list<const char*> kinds) {
    const std::string kind = l.field("kind").get<std::string>();
    for (const char* k : kinds) {
        if (kind == k) {
            return;
        }
    }
    throw FormatError(FormatFault::Schema, "unexpected container kind '" + kind + "'");
}

void expect_consumed(const Loaded& l) {
    if (!l.records.empty()) {
        throw FormatError(FormatFault::Schema, "unexpected tensor '" + l.records.begin()->first + "'");
    }
}

MixedModel decode_mixed_stream(std::istream& in) {
    return guarded([&] {
        Loaded l = read_all(in);
        expect_kind(l, {"model", "mixed"});
        Json slot_list;
        MixedModel mm = make_mixed(decode_base(l, slot_list));
        if (l.header.contains("source_hash")) {
            mm.source_hash = l.header["source_hash"].get<std::string>();
        }
        if (l.header["seeds"].contains("train")) {
            mm.seed = l.header["seeds"]["train"].get<std::uint64_t>();
        }
        for (std::size_t j = 0; j < slot_list.size(); ++j) {
            const Json& s = slot_list[j];
            reject_unknown_keys(s, {"active", "compressed"}, "slot");
            const std::string active = s.at("active").get<std::string>();
            if (active != "original" && active != "compressed") {
                throw FormatError(FormatFault::Schema, "slot " + std::to_string(j) + " has kind '" + active + "'");
            }
            mm.active[j] = active == "compressed" ? SlotKind::Compressed : SlotKind::Original;
            if (!s.contains("compressed") || s["compressed"].is_null()) {
                continue;
            }
            const Json& c = s["compressed"];
            reject_unknown_keys(c, {"ranks", "quantized"}, "compressed slot");
            CompressedLayerParams p;
            p.ranks = rank_plan_from_json(c.at("ranks"));
            p.quantized = c.at("quantized").get<bool>();
            for (auto& [name, t] : slots(p)) {
                *t = l.take(layer_prefix(j) + "compressed/" + name);
            }
            mm.compressed[j] = std::move(p);
        }
        expect_consumed(l);
        mm.validate();
        return mm;
    });
}

}  // namespace

// ---------------------------------------------------------------------------
// Checkpoints

std::string sha256_hex(const std::string& bytes) {
    Sha256 h;
    h.update(bytes);
    return to_hex(h.digest());
}

std::string file_sha256(const std::filesystem::path& path) {
    auto in = open_input(path);
    Sha256 h;
    std::array<char, 1 << 16> buf{};
    while (*in) {
        in->read(buf.data(), buf.size());
        h.update(buf.data(), static_cast<std::size_t>(in->gcount()));
    }
    return to_hex(h.digest());
}

void save_checkpoint(const Model& m, const std::filesystem::path& path, const SaveOptions& opts) {
    m.validate();
    Json h = base_header(m, "model", opts);
    Json slot_list = Json::array();
    for (std::size_t j = 0; j < m.layers.size(); ++j) {
        slot_list.push_back({{"active", "original"}, {"compressed", nullptr}});
    }
    h["slots"] = slot_list;
    Body body;
    add_base(body, m, opts.float_dtype);
    write_atomic(path, assemble(h, body));
}

void save_checkpoint(const MixedModel& m, const std::filesystem::path& path, const SaveOptions& opts) {
    m.validate();
    Json h = base_header(m.base, "mixed", opts);
    h["source_hash"] = m.source_hash;
    h["seeds"]["train"] = m.seed;
    Body body;
    add_base(body, m.base, opts.float_dtype);
    Json slot_list = Json::array();
    for (std::size_t j = 0; j < m.active.size(); ++j) {
        Json s{{"active", to_string(m.active[j])}, {"compressed", nullptr}};
        if (m.compressed[j]) {
            CompressedLayerParams p = *m.compressed[j];
            s["compressed"] = {{"ranks", to_json(p.ranks)}, {"quantized", p.quantized}};
            for (auto& [name, t] : slots(p)) {
                const bool int8 = p.quantized && is_factor(name) && representable_int8(*t);
                body.add(layer_prefix(j) + "compressed/" + name, *t, int8 ? Dtype::I8 : opts.float_dtype);
            }
        }
        slot_list.push_back(s);
    }
    h["slots"] = slot_list;
    write_atomic(path, assemble(h, body));
}

Model decode_model(const std::string& bytes) {
    std::istringstream in(bytes);
    return guarded([&] {
        Loaded l = read_all(in);
        expect_kind(l, {"model"});
        Json slot_list;
        Model m = decode_base(l, slot_list);
        expect_consumed(l);
        return m;
    });
}

MixedModel decode_mixed(const std::string& bytes) {
    std::istringstream in(bytes);
    return decode_mixed_stream(in);
}

Model load_model(const std::filesystem::path& path) {
    auto in = open_input(path);
    return guarded([&] {
        Loaded l = read_all(*in);
        expect_kind(l, {"model"});
        Json slot_list;
        Model m = decode_base(l, slot_list);
        expect_consumed(l);
        return m;
    });
}

MixedModel load_mixed(const std::filesystem::path& path) {
    auto in = open_input(path);
    return decode_mixed_stream(*in);
}

Json read_header(const std::filesystem::path& path) {
    auto in = open_input(path);
    return guarded([&] {
        Source src(*in);
        const Opened o = open_container(src);
        Sha256 hash;
        for (const auto& name : o.names) {
            expect_record(src, hash, name);
        }
        finish_container(src, o, hash);
        return o.header;
    });
}

// ---------------------------------------------------------------------------
// Pair sets

namespace {

std::string pair_name(std::size_t layer, std::size_t k, bool input) {
    return layer_prefix(layer) + "sample" + std::to_string(k) + (input ? "/x_i" : "/x_o");
}

Json pair_header(const PairSetMeta& meta, std::size_t count, const SaveOptions& opts) {
    Json h;
    h["kind"] = "pairs";
    h["layer_index"] = meta.layer_index;
    h["sample_count"] = count;
    h["dims"] = to_json(meta.dims);
    h["source_hash"] = meta.source_hash;
    h["distribution"] = meta.distribution;
    h["causal"] = meta.causal;
    h["provenance"] = opts.provenance.is_object() ? opts.provenance : Json::object();
    Json names = Json::array();
    for (std::size_t k = 0; k < count; ++k) {
        names.push_back(pair_name(meta.layer_index, k, true));
        names.push_back(pair_name(meta.layer_index, k, false));
    }
    h["tensors"] = std::move(names);
    return h;
}

}  // namespace

struct PairSetWriter::Impl {
    std::filesystem::path records_path;
    std::ofstream records;
    Sha256 hash;
};

PairSetWriter::PairSetWriter(std::filesystem::path path, PairSetMeta meta, const SaveOptions& opts)
    : impl_(std::make_unique<Impl>()), path_(std::move(path)), meta_(std::move(meta)), opts_(opts) {
    meta_.dims.validate();
    if (opts_.float_dtype == Dtype::I8) {
        throw ConfigError("pair sets are stored as f32 or f64");
    }
    impl_->records_path = path_.string() + ".records.tmp";
    impl_->records.open(impl_->records_path, std::ios::binary | std::ios::trunc);
    if (!impl_->records) {
        throw IoError("cannot open '" + impl_->records_path.string() + "' for writing");
    }
}

PairSetWriter::~PairSetWriter() {
    if (!finished_) {
        impl_->records.close();
        std::error_code ec;
        std::filesystem::remove(impl_->records_path, ec);
    }
}

void PairSetWriter::write(const HiddenStatePair& pair) {
    if (finished_) {
        throw InputError("pair set already finished");
    }
    const std::size_t d = meta_.dims.d_model;
    if (pair.input.cols() != d || pair.output.cols() != d || pair.input.rows() != pair.output.rows() ||
        pair.input.rows() == 0) {
        throw InputError("pair " + std::to_string(count_) + " has shapes " + pair.input.shape_string() + " and " +
                         pair.output.shape_string() + ", expected matching n×" + std::to_string(d));
    }
    for (bool input : {true, false}) {
        const std::string rec =
            encode_record(pair_name(meta_.layer_index, count_, input), input ? pair.input : pair.output,
                          opts_.float_dtype);
        impl_->hash.update(rec);
        impl_->records.write(rec.data(), static_cast<std::streamsize>(rec.size()));
    }
    if (!impl_->records) {
        throw IoError("write to '" + impl_->records_path.string() + "' failed");
    }
    ++count_;
}

void PairSetWriter::finish() {
    if (finished_) {
        return;
    }
    if (count_ == 0) {
        throw InputError("pair set is empty");
    }
    impl_->records.close();
    Json h = pair_header(meta_, count_, opts_);
    h["content_hash"] = content_hash(h, impl_->hash.digest());
    const std::filesystem::path tmp = path_.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        std::ifstream in(impl_->records_path, std::ios::binary);
        if (!out || !in) {
            throw IoError("cannot assemble '" + path_.string() + "'");
        }
        const std::string head = prefix(h);
        out.write(head.data(), static_cast<std::streamsize>(head.size()));
        out << in.rdbuf();
        if (!out) {
            throw IoError("write to '" + tmp.string() + "' failed");
        }
    }
    std::error_code ec;
    std::filesystem::remove(impl_->records_path, ec);
    std::filesystem::rename(tmp, path_, ec);
    if (ec) {
        throw IoError("cannot move '" + tmp.string() + "' to '" + path_.string() + "': " + ec.message());
    }
    finished_ = true;
}

struct PairSetReader::Impl {
    std::unique_ptr<std::istream> in;
    std::unique_ptr<Source> src;
    Opened opened;
    Sha256 hash;
    std::size_t next = 0;
};

PairSetReader::PairSetReader(const std::filesystem::path& path) : PairSetReader(open_input(path)) {}

PairSetReader::PairSetReader(std::unique_ptr<std::istream> in) : impl_(std::make_unique<Impl>()) {
    impl_->in = std::move(in);
    guarded([&] {
        impl_->src = std::make_unique<Source>(*impl_->in);
        impl_->opened = open_container(*impl_->src);
        const Json& h = impl_->opened.header;
        if (h["kind"] != "pairs") {
            throw FormatError(FormatFault::Schema, "unexpected container kind '" + h["kind"].get<std::string>() + "'");
        }
        reject_unknown_keys(h,
                            {"kind", "layer_index", "sample_count", "dims", "source_hash", "distribution", "causal",
                             "provenance", "tensors", "content_hash"},
                            "pair set header");
        meta_.layer_index = h.at("layer_index").get<std::size_t>();
        meta_.dims = dims_from_json(h.at("dims"));
        meta_.dims.validate();
        meta_.source_hash = h.at("source_hash").get<std::string>();
        meta_.distribution = h.at("distribution").get<std::string>();
        meta_.causal = h.at("causal").get<bool>();
        size_ = h.at("sample_count").get<std::size_t>();
        if (size_ == 0 || impl_->opened.names.size() != 2 * size_) {
            throw FormatError(FormatFault::Schema, "sample_count does not match the tensor list");
        }
        for (std::size_t k = 0; k < size_; ++k) {
            if (impl_->opened.names[2 * k] != pair_name(meta_.layer_index, k, true) ||
                impl_->opened.names[2 * k + 1] != pair_name(meta_.layer_index, k, false)) {
                throw FormatError(FormatFault::Schema, "tensor list is not an x_i/x_o pairing at sample " +
                                                           std::to_string(k));
            }
        }
        return 0;
    });
}

PairSetReader::~PairSetReader() = default;

bool PairSetReader::next(HiddenStatePair& out) {
    if (impl_->next >= size_) {
        return false;
    }
    guarded([&] {
        const std::size_t k = impl_->next;
        Record xi = expect_record(*impl_->src, impl_->hash, impl_->opened.names[2 * k]);
        Record xo = expect_record(*impl_->src, impl_->hash, impl_->opened.names[2 * k + 1]);
        const std::size_t d = meta_.dims.d_model;
        if (xi.value.cols() != d || xo.value.cols() != d || xi.value.rows() != xo.value.rows() ||
            xi.value.rows() == 0) {
            throw FormatError(FormatFault::Schema, "sample " + std::to_string(k) + " has shapes " +
                                                       xi.value.shape_string() + " and " + xo.value.shape_string() +
                                                       ", header width is " + std::to_string(d));
        }
        out.input = std::move(xi.value);
        out.output = std::move(xo.value);
        if (++impl_->next == size_) {
            finish_container(*impl_->src, impl_->opened, impl_->hash);
        }
        return 0;
    });
    return true;
}

void save_pairs(const HiddenStatePairSet& pairs, const std::filesystem::path& path, const SaveOptions& opts) {
    pairs.validate();
    PairSetWriter w(path, {pairs.layer_index, pairs.dims, pairs.source_hash, pairs.distribution, pairs.causal}, opts);
    for (const auto& p : pairs.pairs) {
        w.write(p);
    }
    w.finish();
}

namespace {

HiddenStatePairSet drain(PairSetReader& r) {
    HiddenStatePairSet s;
    s.layer_index = r.meta().layer_index;
    s.dims = r.meta().dims;
    s.source_hash = r.meta().source_hash;
    s.distribution = r.meta().distribution;
    s.causal = r.meta().causal;
    HiddenStatePair p;
    while (r.next(p)) {
        s.pairs.push_back(std::move(p));
    }
    return s;
}

}  // namespace

HiddenStatePairSet load_pairs(const std::filesystem::path& path) {
    PairSetReader r(path);
    return drain(r);
}

HiddenStatePairSet decode_pairs(const std::string& bytes) {
    PairSetReader r(std::make_unique<std::istringstream>(bytes));
    return drain(r);
}

// ---------------------------------------------------------------------------
// Reports

void save_report(const Json& report, const std::filesystem::path& path) {
    Json h;
    h["kind"] = "report";
    h["report"] = report;
    write_atomic(path, assemble(h, Body{}));
}

Json load_report(const std::filesystem::path& path) {
    auto in = open_input(path);
    return guarded([&] {
        Loaded l = read_all(*in);
        expect_kind(l, {"report"});
        expect_consumed(l);
        return l.field("report");
    });
}

}  // namespace adaptwin
