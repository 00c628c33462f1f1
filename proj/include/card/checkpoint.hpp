#pragma once

#include "card/common.hpp"
#include "card/configfile.hpp"
#include "card/model.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace card {

// Checkpoint format "CARD-CK1":
//   magic (8 bytes), u32 LE format version,
//   u32 LE blob length + UTF-8 config blob ("key = value" lines),
//   then named arrays until EOF:
//     u32 LE name length + name bytes, u8 rank, u32 LE dims[rank],
//     raw IEEE-754 binary32 little-endian values.
// Readers reject unknown magic or version.

constexpr uint32_t kCheckpointVersion = 1;

struct NamedArray {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

namespace detail {

inline void put_bytes(std::string & b, const void * p, size_t n) {
    b.append(reinterpret_cast<const char *>(p), n);
}

}  // namespace detail

inline void write_checkpoint_raw(const std::string & path, const std::string & blob,
                                 const std::vector<NamedArray> & arrays) {
    std::string buf;
    buf += "CARD-CK1";
    detail::put_u32(buf, kCheckpointVersion);
    detail::put_u32(buf, uint32_t(blob.size()));
    buf += blob;
    for (const auto & a : arrays) {
        detail::put_u32(buf, uint32_t(a.name.size()));
        buf += a.name;
        buf.push_back(char(uint8_t(a.shape.size())));
        size_t numel = 1;
        for (int dim : a.shape) {
            detail::put_u32(buf, uint32_t(dim));
            numel *= size_t(dim);
        }
        CARD_CHECK(numel == a.data.size(), "array '" + a.name + "' shape/data mismatch");
        detail::put_bytes(buf, a.data.data(), a.data.size() * 4);
    }
    // write to a temp file first so an I/O failure never leaves a torn file
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        CARD_CHECK(bool(out), "cannot open '" + tmp + "' for writing");
        out.write(buf.data(), std::streamsize(buf.size()));
        CARD_CHECK(bool(out), "short write to '" + tmp + "'");
    }
    CARD_CHECK(std::rename(tmp.c_str(), path.c_str()) == 0, "cannot move checkpoint into place at '" + path + "'");
}

struct CheckpointData {
    std::string blob;
    std::vector<NamedArray> arrays;

    std::map<std::string, std::string> blob_kv() const {
        std::map<std::string, std::string> kv;
        for (auto & [k, v] : parse_kv_text_blob()) kv[k] = v;
        return kv;
    }

    std::vector<std::pair<std::string, std::string>> parse_kv_text_blob() const;

    const NamedArray * find(const std::string & name) const {
        for (const auto & a : arrays)
            if (a.name == name) return &a;
        return nullptr;
    }
};

inline CheckpointData read_checkpoint_raw(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    CARD_CHECK(bool(in), "cannot open checkpoint '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CARD_CHECK(buf.size() >= 16, "checkpoint truncated");
    CARD_CHECK(buf.compare(0, 8, "CARD-CK1") == 0, "bad checkpoint magic");
    const uint8_t * p = reinterpret_cast<const uint8_t *>(buf.data());
    size_t off = 8;
    uint32_t version = detail::get_u32(p + off);
    off += 4;
    CARD_CHECK(version == kCheckpointVersion,
               "unsupported checkpoint version " + std::to_string(version));
    uint32_t blob_len = detail::get_u32(p + off);
    off += 4;
    CARD_CHECK(off + blob_len <= buf.size(), "checkpoint truncated in config blob");
    CheckpointData ck;
    ck.blob.assign(buf, off, blob_len);
    off += blob_len;
    while (off < buf.size()) {
        CARD_CHECK(off + 4 <= buf.size(), "checkpoint truncated in array header");
        uint32_t name_len = detail::get_u32(p + off);
        off += 4;
        CARD_CHECK(off + name_len + 1 <= buf.size(), "checkpoint truncated in array name");
        NamedArray a;
        a.name.assign(buf, off, name_len);
        off += name_len;
        uint8_t rank = p[off++];
        size_t numel = 1;
        for (int r = 0; r < rank; ++r) {
            CARD_CHECK(off + 4 <= buf.size(), "checkpoint truncated in dims");
            uint32_t dim = detail::get_u32(p + off);
            off += 4;
            a.shape.push_back(int(dim));
            numel *= dim;
        }
        CARD_CHECK(off + numel * 4 <= buf.size(), "checkpoint truncated in array data");
        a.data.resize(numel);
        std::memcpy(a.data.data(), p + off, numel * 4);
        off += numel * 4;
        ck.arrays.push_back(std::move(a));
    }
    return ck;
}

inline std::vector<std::pair<std::string, std::string>> CheckpointData::parse_kv_text_blob() const {
    return parse_kv_text(blob, "checkpoint blob");
}

// ---- model-level helpers ----------------------------------------------------

inline std::map<std::string, std::string> model_config_kv(const ModelConfig & cfg) {
    return {
        {"model.n_layers", std::to_string(cfg.n_layers)},
        {"model.n_heads", std::to_string(cfg.n_heads)},
        {"model.d_model", std::to_string(cfg.d_model)},
        {"model.d_ff", std::to_string(cfg.d_ff)},
        {"model.max_len", std::to_string(cfg.max_len)},
        {"model.vocab_size", std::to_string(cfg.vocab_size)},
        {"model.attn_mode", to_string(cfg.attn_mode)},
        {"model.block_k", std::to_string(cfg.block_k)},
    };
}

inline ModelConfig model_config_from_kv(const std::map<std::string, std::string> & kv) {
    ModelConfig cfg;
    auto get = [&](const char * key) -> const std::string & {
        auto it = kv.find(key);
        CARD_CHECK(it != kv.end(), std::string("checkpoint blob missing key '") + key + "'");
        return it->second;
    };
    cfg.n_layers   = int(parse_int(get("model.n_layers"), "model.n_layers"));
    cfg.n_heads    = int(parse_int(get("model.n_heads"), "model.n_heads"));
    cfg.d_model    = int(parse_int(get("model.d_model"), "model.d_model"));
    cfg.d_ff       = int(parse_int(get("model.d_ff"), "model.d_ff"));
    cfg.max_len    = int(parse_int(get("model.max_len"), "model.max_len"));
    cfg.vocab_size = int(parse_int(get("model.vocab_size"), "model.vocab_size"));
    cfg.attn_mode  = attn_mode_from(get("model.attn_mode"));
    cfg.block_k    = int(parse_int(get("model.block_k"), "model.block_k"));
    cfg.validate();
    return cfg;
}

// Append every array of `params` under `prefix` (e.g. "" or "adam_m.").
inline void append_params(std::vector<NamedArray> & arrays, const Params<float> & params,
                          const std::string & prefix = "") {
    Params<float>::visit(params, [&](const std::string & name, const Tensor<float> & t) {
        NamedArray a;
        a.name = prefix + name;
        a.shape = t.shape;
        a.data = t.data;
        arrays.push_back(std::move(a));
    });
}

inline void extract_params(const CheckpointData & ck, Params<float> & params, const std::string & prefix = "") {
    Params<float>::visit(params, [&](const std::string & name, Tensor<float> & t) {
        const NamedArray * a = ck.find(prefix + name);
        CARD_CHECK(a != nullptr, "checkpoint missing array '" + prefix + name + "'");
        CARD_CHECK(a->shape == t.shape, "checkpoint array '" + prefix + name + "' has unexpected shape");
        t.data = a->data;
    });
}

inline void save_model(const std::string & path, const Params<float> & params,
                       std::map<std::string, std::string> extra_kv = {}) {
    auto kv = model_config_kv(params.cfg);
    for (auto & [k, v] : extra_kv) kv[k] = v;
    std::vector<NamedArray> arrays;
    append_params(arrays, params);
    write_checkpoint_raw(path, serialize_kv(kv), arrays);
}

inline Params<float> load_model(const std::string & path, std::map<std::string, std::string> * kv_out = nullptr) {
    CheckpointData ck = read_checkpoint_raw(path);
    auto kv = ck.blob_kv();
    ModelConfig cfg = model_config_from_kv(kv);
    Params<float> params(cfg);
    extract_params(ck, params);
    if (kv_out) *kv_out = std::move(kv);
    return params;
}

}  // namespace card
