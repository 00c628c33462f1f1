#pragma once

#include "card/common.hpp"
#include "card/markov.hpp"
#include "card/rng.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace card {

// Byte-level vocabulary: ids 0..255 are raw bytes, then three specials.
// Clean corpus data never contains a special id; bos is injected by the
// model input builder and pad only appears in the final partial sequence.
struct Vocab {
    static constexpr token_t mask_id = 256;
    static constexpr token_t bos_id  = 257;
    static constexpr token_t pad_id  = 258;
    static constexpr int     size    = 259;

    static bool is_byte(token_t id) { return id >= 0 && id < 256; }
};

inline std::vector<token_t> tokenize(std::string_view text) {
    std::vector<token_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(token_t(c));
    return ids;
}

// Inverse of tokenize on clean streams; non-byte ids (specials emitted during
// generation) are skipped so decoded output is always printable bytes.
inline std::string detokenize(const std::vector<token_t> & ids) {
    std::string out;
    out.reserve(ids.size());
    for (token_t id : ids)
        if (Vocab::is_byte(id)) out.push_back(char(uint8_t(id)));
    return out;
}

enum class Split { train, validation };

struct Dataset {
    int seq_len = 0;
    uint64_t seed = 0;
    Split split = Split::train;
    std::vector<std::vector<token_t>> seqs;

    size_t size() const { return seqs.size(); }
    bool empty() const { return seqs.empty(); }

    // positions that carry real data (pad tail excluded from supervision)
    static int data_len(const std::vector<token_t> & s) {
        int n = int(s.size());
        while (n > 0 && s[size_t(n) - 1] == Vocab::pad_id) --n;
        return n;
    }
};

// Chunks a token stream into fixed-length sequences; the final partial chunk
// is padded with pad_id. An empty stream gives an empty dataset.
inline Dataset pack(const std::vector<token_t> & stream, int seq_len, uint64_t seed) {
    CARD_CHECK(seq_len >= 2, "seq_len must be >= 2");
    Dataset ds;
    ds.seq_len = seq_len;
    ds.seed = seed;
    for (size_t off = 0; off < stream.size(); off += size_t(seq_len)) {
        std::vector<token_t> s(stream.begin() + ptrdiff_t(off),
                               stream.begin() + ptrdiff_t(std::min(stream.size(), off + size_t(seq_len))));
        s.resize(size_t(seq_len), Vocab::pad_id);
        ds.seqs.push_back(std::move(s));
    }
    return ds;
}

// Deterministic split: membership of sequence i is a pure function of
// (dataset seed, i), independent of how many sequences exist.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset & all, double val_fraction) {
    CARD_CHECK(val_fraction >= 0.0 && val_fraction < 1.0, "val_fraction must be in [0, 1)");
    Dataset tr, va;
    tr.seq_len = va.seq_len = all.seq_len;
    tr.seed = va.seed = all.seed;
    tr.split = Split::train;
    va.split = Split::validation;
    for (size_t i = 0; i < all.seqs.size(); ++i) {
        Rng r(all.seed, streams::split, i);
        (r.uniform() < val_fraction ? va : tr).seqs.push_back(all.seqs[i]);
    }
    return {std::move(tr), std::move(va)};
}

// First-order Markov sample mapped onto the first k byte ids.
// start < 0 draws the initial symbol from the stationary distribution.
inline std::vector<token_t> synth_markov(const MarkovChain & chain, size_t n_tokens, uint64_t seed, int start = -1) {
    CARD_CHECK(chain.k <= 256, "markov alphabet must fit the byte vocabulary");
    std::vector<token_t> out;
    if (n_tokens == 0) return out;
    out.reserve(n_tokens);

    Rng rng(seed, streams::markov);
    int state;
    if (start >= 0) {
        CARD_CHECK(start < chain.k, "start symbol out of range");
        state = start;
    } else {
        auto pi = chain.stationary();
        double u = rng.uniform(), acc = 0.0;
        state = chain.k - 1;
        for (int a = 0; a < chain.k; ++a) {
            acc += pi[a];
            if (u < acc) { state = a; break; }
        }
    }
    out.push_back(token_t(state));
    for (size_t i = 1; i < n_tokens; ++i) {
        double u = rng.uniform(), acc = 0.0;
        int nxt = chain.k - 1;
        for (int b = 0; b < chain.k; ++b) {
            acc += chain.P[state * chain.k + b];
            if (u < acc) { nxt = b; break; }
        }
        state = nxt;
        out.push_back(token_t(state));
    }
    return out;
}

// ---- dataset cache -------------------------------------------------------
// magic "CARD-DS1", u32 LE seq_len, u64 LE sequence count, then token ids as
// u16 LE in sequence order.

namespace detail {
inline void put_u32(std::string & b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(char(uint8_t(v >> (8 * i))));
}
inline void put_u64(std::string & b, uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(char(uint8_t(v >> (8 * i))));
}
inline uint32_t get_u32(const uint8_t * p) {
    return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}
inline uint64_t get_u64(const uint8_t * p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
    return v;
}
}  // namespace detail

inline void save_dataset(const Dataset & ds, const std::string & path) {
    std::string buf;
    buf += "CARD-DS1";
    detail::put_u32(buf, uint32_t(ds.seq_len));
    detail::put_u64(buf, uint64_t(ds.seqs.size()));
    for (const auto & s : ds.seqs)
        for (token_t id : s) {
            CARD_CHECK(id >= 0 && id < (1 << 16), "token id does not fit u16");
            buf.push_back(char(uint8_t(id)));
            buf.push_back(char(uint8_t(id >> 8)));
        }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    CARD_CHECK(bool(out), "cannot open '" + path + "' for writing");
    out.write(buf.data(), std::streamsize(buf.size()));
    CARD_CHECK(bool(out), "short write to '" + path + "'");
}

inline Dataset load_dataset(const std::string & path, uint64_t seed = 0) {
    std::ifstream in(path, std::ios::binary);
    CARD_CHECK(bool(in), "cannot open dataset cache '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CARD_CHECK(buf.size() >= 20, "dataset cache truncated");
    CARD_CHECK(buf.compare(0, 8, "CARD-DS1") == 0, "bad dataset cache magic");
    const uint8_t * p = reinterpret_cast<const uint8_t *>(buf.data());
    uint32_t L = detail::get_u32(p + 8);
    uint64_t count = detail::get_u64(p + 12);
    CARD_CHECK(buf.size() == 20 + size_t(count) * L * 2, "dataset cache size mismatch");
    Dataset ds;
    ds.seq_len = int(L);
    ds.seed = seed;
    ds.seqs.resize(count);
    size_t off = 20;
    for (uint64_t i = 0; i < count; ++i) {
        auto & s = ds.seqs[i];
        s.resize(L);
        for (uint32_t j = 0; j < L; ++j, off += 2)
            s[j] = token_t(uint32_t(p[off]) | uint32_t(p[off + 1]) << 8);
    }
    return ds;
}

inline std::string read_text_file(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    CARD_CHECK(bool(in), "cannot open text file '" + path + "'");
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace card
