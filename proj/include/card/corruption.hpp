#pragma once

#include "card/common.hpp"
#include "card/corpus.hpp"
#include "card/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace card {

// Forward noising process with a linear schedule sigma(t) = t. All masking
// strategies operate on 0-based positions; the window arithmetic below keeps
// the 1-based index set {L-W+1, ..., L} semantics of the tail strategies.

enum class MaskStrategy {
    none,         // no corruption (reduces the weighted loss to plain causal CE)
    soft_tail,    // N masks drawn without replacement from the trailing window W
    strict_tail,  // last N positions, contiguous
    uniform,      // i.i.d. Bernoulli(t) per position
    block,        // i.i.d. Bernoulli(t) inside one block, clean elsewhere
};

inline const char * to_string(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::none:        return "none";
        case MaskStrategy::soft_tail:   return "soft_tail";
        case MaskStrategy::strict_tail: return "strict_tail";
        case MaskStrategy::uniform:     return "uniform";
        case MaskStrategy::block:       return "block";
    }
    return "?";
}

inline MaskStrategy mask_strategy_from(const std::string & s) {
    if (s == "none")        return MaskStrategy::none;
    if (s == "soft_tail")   return MaskStrategy::soft_tail;
    if (s == "strict_tail") return MaskStrategy::strict_tail;
    if (s == "uniform")     return MaskStrategy::uniform;
    if (s == "block")       return MaskStrategy::block;
    throw usage_error("unknown mask strategy '" + s + "'");
}

struct CorruptionConfig {
    MaskStrategy strategy = MaskStrategy::soft_tail;
    double tail_lambda    = 2.0;  // window factor, >= 1
    int block_size        = 8;   // block strategy only; must divide L

    void validate(int L) const {
        CARD_CHECK(tail_lambda >= 1.0, "tail_lambda must be >= 1");
        if (strategy == MaskStrategy::block) {
            CARD_CHECK(block_size >= 1 && block_size <= L && L % block_size == 0,
                       "block_size must divide the sequence length");
        }
    }
};

struct MaskPattern {
    double t = 0.0;                // noise time in [0, 1]
    std::vector<uint8_t> masked;   // length L

    int length() const { return int(masked.size()); }
    int count() const { return int(std::accumulate(masked.begin(), masked.end(), 0)); }
};

inline double sample_t(Rng & rng) { return rng.uniform(); }

// N = max(1, floor(L*t)) masks placed uniformly without replacement inside
// the trailing window of W = min(L, floor(N*lambda)) positions.
inline MaskPattern soft_tail_mask(int L, double t, double lambda, Rng & rng) {
    CARD_CHECK(L >= 1, "empty sequence");
    CARD_CHECK(lambda >= 1.0, "lambda must be >= 1");
    int N = std::max(1, int(std::floor(L * t)));
    N = std::min(N, L);
    int W = std::min(L, int(std::floor(N * lambda)));
    MaskPattern p;
    p.t = t;
    p.masked.assign(size_t(L), 0);
    // partial Fisher-Yates over the window indices [L-W, L)
    std::vector<int> idx(size_t(W), 0);
    std::iota(idx.begin(), idx.end(), L - W);
    for (int i = 0; i < N; ++i) {
        int j = i + int(rng.below(uint64_t(W - i)));
        std::swap(idx[size_t(i)], idx[size_t(j)]);
        p.masked[size_t(idx[size_t(i)])] = 1;
    }
    return p;
}

inline MaskPattern strict_tail_mask(int L, double t) {
    CARD_CHECK(L >= 1, "empty sequence");
    int N = std::max(1, int(std::floor(L * t)));
    N = std::min(N, L);
    MaskPattern p;
    p.t = t;
    p.masked.assign(size_t(L), 0);
    for (int i = L - N; i < L; ++i) p.masked[size_t(i)] = 1;
    return p;
}

inline MaskPattern uniform_mask(int L, double t, Rng & rng) {
    CARD_CHECK(L >= 1, "empty sequence");
    MaskPattern p;
    p.t = t;
    p.masked.assign(size_t(L), 0);
    for (int i = 0; i < L; ++i) p.masked[size_t(i)] = rng.uniform() < t ? 1 : 0;
    return p;
}

// i.i.d. Bernoulli(t) inside block b (1-based), clean everywhere else
inline MaskPattern block_mask(int L, double t, int K, int b, Rng & rng) {
    CARD_CHECK(L >= 1 && K >= 1 && L % K == 0, "block size must divide L");
    CARD_CHECK(b >= 1 && b <= L / K, "block index out of range");
    MaskPattern p;
    p.t = t;
    p.masked.assign(size_t(L), 0);
    for (int i = (b - 1) * K; i < b * K; ++i) p.masked[size_t(i)] = rng.uniform() < t ? 1 : 0;
    return p;
}

inline MaskPattern empty_mask(int L) {
    MaskPattern p;
    p.t = 0.0;
    p.masked.assign(size_t(L), 0);
    return p;
}

inline std::vector<token_t> apply_mask(const std::vector<token_t> & x0, const MaskPattern & pattern) {
    CARD_CHECK(pattern.masked.size() == x0.size(), "mask length mismatch");
    std::vector<token_t> xt = x0;
    for (size_t i = 0; i < xt.size(); ++i)
        if (pattern.masked[i]) xt[i] = Vocab::mask_id;
    return xt;
}

// dispatch used by the trainer and the analysis suite; block strategy masks
// block `block_index` (1-based)
inline MaskPattern draw_mask(const CorruptionConfig & cfg, int L, double t, Rng & rng, int block_index = 1) {
    cfg.validate(L);
    switch (cfg.strategy) {
        case MaskStrategy::none:        return empty_mask(L);
        case MaskStrategy::soft_tail:   return soft_tail_mask(L, t, cfg.tail_lambda, rng);
        case MaskStrategy::strict_tail: return strict_tail_mask(L, t);
        case MaskStrategy::uniform:     return uniform_mask(L, t, rng);
        case MaskStrategy::block:       return block_mask(L, t, cfg.block_size, block_index, rng);
    }
    fail("unreachable");
}

inline std::string mask_bitstring(const MaskPattern & p) {
    std::string s(p.masked.size(), '0');
    for (size_t i = 0; i < p.masked.size(); ++i)
        if (p.masked[i]) s[i] = '1';
    return s;
}

}  // namespace card
