#pragma once

#include "card/common.hpp"
#include "card/corruption.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace card {

// Context-aware loss weights. A masked position costs 1, or 2 when its
// predecessor is masked too; the ambiguity score S_n folds the costs of the
// history into a geometric decay, and the weight is w_n = 1 / (beta + S_n).
//
// The decay/index convention has several defensible variants; all are
// implemented behind ScoreVariant. The default, strict_prefix, sums costs of
// strictly preceding positions with the immediate predecessor undecayed:
//   S_n = sum_{i=1}^{n-1} C_i * (1-p)^(n-1-i)
// which is the O(L) recurrence S_{n+1} = (1-p) * S_n + C_n with S_1 = 0.

enum class ScoreVariant {
    strict_prefix,           // default: i <= n-1, predecessor at full weight
    strict_prefix_decayed,   // i <= n-1, predecessor decayed once: exponent (n-i)
    include_current,         // i <= n, own cost at full weight: exponent (n-i)
    include_current_boosted, // i <= n, own cost amplified by 1/(1-p): exponent (n-1-i)
};

inline const char * to_string(ScoreVariant v) {
    switch (v) {
        case ScoreVariant::strict_prefix:           return "strict_prefix";
        case ScoreVariant::strict_prefix_decayed:   return "strict_prefix_decayed";
        case ScoreVariant::include_current:         return "include_current";
        case ScoreVariant::include_current_boosted: return "include_current_boosted";
    }
    return "?";
}

inline ScoreVariant score_variant_from(const std::string & s) {
    if (s == "strict_prefix")           return ScoreVariant::strict_prefix;
    if (s == "strict_prefix_decayed")   return ScoreVariant::strict_prefix_decayed;
    if (s == "include_current")         return ScoreVariant::include_current;
    if (s == "include_current_boosted") return ScoreVariant::include_current_boosted;
    throw usage_error("unknown score variant '" + s + "'");
}

struct WeightConfig {
    double decay_p  = 0.5;  // in (0, 1)
    double base_beta = 1.0; // > 0
    ScoreVariant variant = ScoreVariant::strict_prefix;

    void validate() const {
        CARD_CHECK(decay_p > 0.0 && decay_p < 1.0, "decay_p must be in (0, 1)");
        CARD_CHECK(base_beta > 0.0, "base_beta must be > 0");
    }
};

// C_i in {0, 1, 2}; the position before the sequence start counts as clean
inline std::vector<int> corruption_costs(const MaskPattern & pattern) {
    const int L = pattern.length();
    CARD_CHECK(L >= 1, "empty mask pattern");
    std::vector<int> C(size_t(L), 0);
    for (int i = 0; i < L; ++i) {
        if (!pattern.masked[size_t(i)]) continue;
        bool prev = i > 0 && pattern.masked[size_t(i) - 1];
        C[size_t(i)] = prev ? 2 : 1;
    }
    return C;
}

inline std::vector<double> ambiguity_scores(const std::vector<int> & C, double p, ScoreVariant variant) {
    const size_t L = C.size();
    CARD_CHECK(L >= 1, "empty cost vector");
    const double keep = 1.0 - p;
    // base recurrence: strict prefix, predecessor at full weight
    std::vector<double> S(L, 0.0);
    for (size_t n = 1; n < L; ++n) S[n] = keep * S[n - 1] + double(C[n - 1]);
    switch (variant) {
        case ScoreVariant::strict_prefix:
            return S;
        case ScoreVariant::strict_prefix_decayed:
            for (auto & s : S) s *= keep;
            return S;
        case ScoreVariant::include_current:
            for (size_t n = 0; n < L; ++n) S[n] = keep * S[n] + double(C[n]);
            return S;
        case ScoreVariant::include_current_boosted:
            for (size_t n = 0; n < L; ++n) S[n] += double(C[n]) / keep;
            return S;
    }
    fail("unreachable");
}

inline std::vector<double> loss_weights(const std::vector<double> & S, double beta) {
    CARD_CHECK(beta > 0.0, "beta must be > 0");
    std::vector<double> w(S.size());
    for (size_t i = 0; i < S.size(); ++i) {
        CARD_CHECK(S[i] >= 0.0, "ambiguity scores must be non-negative");
        w[i] = 1.0 / (beta + S[i]);
    }
    return w;
}

struct WeightVector {
    std::vector<int> C;
    std::vector<double> S;
    std::vector<double> w;
};

inline WeightVector compute_weights(const MaskPattern & pattern, const WeightConfig & cfg) {
    cfg.validate();
    WeightVector out;
    out.C = corruption_costs(pattern);
    out.S = ambiguity_scores(out.C, cfg.decay_p, cfg.variant);
    out.w = loss_weights(out.S, cfg.base_beta);
    return out;
}

}  // namespace card
