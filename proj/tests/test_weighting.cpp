#include "card/weighting.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace card;

namespace {

// Brute-force oracle, written straight from the definitions as a double sum
// over the history. Intentionally independent of the streaming recurrence.
std::vector<int> oracle_costs(const std::vector<uint8_t> & masked) {
    const int L = int(masked.size());
    std::vector<int> C(size_t(L), 0);
    for (int i = 1; i <= L; ++i) {  // 1-based positions
        bool self = masked[size_t(i) - 1];
        bool prev = i >= 2 && masked[size_t(i) - 2];
        C[size_t(i) - 1] = int(self) * (1 + int(prev));
    }
    return C;
}

std::vector<double> oracle_scores(const std::vector<int> & C, double p, ScoreVariant v) {
    const int L = int(C.size());
    std::vector<double> S(size_t(L), 0.0);
    for (int n = 1; n <= L; ++n) {
        double s = 0.0;
        switch (v) {
            case ScoreVariant::strict_prefix:
                for (int i = 1; i <= n - 1; ++i) s += C[size_t(i) - 1] * std::pow(1.0 - p, n - 1 - i);
                break;
            case ScoreVariant::strict_prefix_decayed:
                for (int i = 1; i <= n - 1; ++i) s += C[size_t(i) - 1] * std::pow(1.0 - p, n - i);
                break;
            case ScoreVariant::include_current:
                for (int i = 1; i <= n; ++i) s += C[size_t(i) - 1] * std::pow(1.0 - p, n - i);
                break;
            case ScoreVariant::include_current_boosted:
                for (int i = 1; i <= n; ++i) s += C[size_t(i) - 1] * std::pow(1.0 - p, n - 1 - i);
                break;
        }
        S[size_t(n) - 1] = s;
    }
    return S;
}

MaskPattern pattern_from_bits(int L, unsigned bits) {
    MaskPattern p;
    p.masked.assign(size_t(L), 0);
    for (int i = 0; i < L; ++i) p.masked[size_t(i)] = (bits >> i) & 1u;
    return p;
}

}  // namespace

TEST_CASE("corruption costs: worked examples") {
    REQUIRE(corruption_costs(pattern_from_bits(4, 0b1100)) == std::vector<int>{0, 0, 1, 2});
    REQUIRE(corruption_costs(pattern_from_bits(4, 0b0000)) == std::vector<int>{0, 0, 0, 0});
    REQUIRE(corruption_costs(pattern_from_bits(4, 0b0101)) == std::vector<int>{1, 0, 1, 0});
}

TEST_CASE("ambiguity scores: worked examples at p=0.5") {
    // single trailing-pair mask: only position 4 sees the cost of position 3
    auto S = ambiguity_scores({0, 0, 1, 2}, 0.5, ScoreVariant::strict_prefix);
    REQUIRE(S == std::vector<double>{0.0, 0.0, 0.0, 1.0});

    REQUIRE(ambiguity_scores({0, 0, 0, 0}, 0.5, ScoreVariant::strict_prefix) ==
            std::vector<double>{0, 0, 0, 0});

    // a single leading cost decays geometrically
    REQUIRE(ambiguity_scores({2, 0, 0, 0}, 0.5, ScoreVariant::strict_prefix) ==
            std::vector<double>{0.0, 2.0, 1.0, 0.5});
}

TEST_CASE("loss weights: worked examples") {
    auto w = loss_weights({0, 0, 0, 1}, 1.0);
    REQUIRE(w == std::vector<double>{1.0, 1.0, 1.0, 0.5});
    REQUIRE(loss_weights({0, 0}, 1.0) == std::vector<double>{1.0, 1.0});
    REQUIRE(loss_weights({3.0}, 1.0)[0] == Catch::Approx(0.25));
    REQUIRE_THROWS(loss_weights({-0.1}, 1.0));
    REQUIRE_THROWS(loss_weights({1.0}, 0.0));
}

TEST_CASE("exhaustive oracle equivalence, all variants, L <= 6") {
    // p = 0.5 makes every operation dyadic, so recurrence and double sum must
    // agree bit for bit; a generic p gets a tolerance.
    for (int L = 1; L <= 6; ++L) {
        for (unsigned bits = 0; bits < (1u << L); ++bits) {
            MaskPattern p = pattern_from_bits(L, bits);
            auto C = corruption_costs(p);
            REQUIRE(C == oracle_costs(p.masked));
            for (ScoreVariant v : {ScoreVariant::strict_prefix, ScoreVariant::strict_prefix_decayed,
                                   ScoreVariant::include_current, ScoreVariant::include_current_boosted}) {
                auto S = ambiguity_scores(C, 0.5, v);
                auto So = oracle_scores(C, 0.5, v);
                REQUIRE(S == So);
                auto w = loss_weights(S, 1.0);
                for (int n = 0; n < L; ++n) REQUIRE(w[size_t(n)] == 1.0 / (1.0 + So[size_t(n)]));

                auto S3 = ambiguity_scores(C, 0.3, v);
                auto S3o = oracle_scores(C, 0.3, v);
                for (int n = 0; n < L; ++n)
                    REQUIRE(S3[size_t(n)] == Catch::Approx(S3o[size_t(n)]).margin(1e-12));
            }
        }
    }
}

TEST_CASE("weight bound and clean-prefix identities") {
    WeightConfig cfg;
    Rng r(5);
    for (int rep = 0; rep < 500; ++rep) {
        int L = 2 + int(r.below(30));
        MaskPattern p;
        p.masked.resize(size_t(L));
        for (auto & m : p.masked) m = uint8_t(r.below(2));
        WeightVector wv = compute_weights(p, cfg);
        bool clean_so_far = true;
        for (int n = 0; n < L; ++n) {
            // w*S < 1 always (Prop 1 surrogate)
            REQUIRE(wv.w[size_t(n)] * wv.S[size_t(n)] < 1.0);
            // clean prefix implies weight exactly 1/beta
            if (clean_so_far) REQUIRE(wv.w[size_t(n)] == 1.0 / cfg.base_beta);
            if (p.masked[size_t(n)]) clean_so_far = false;
            // geometric decay through clean stretches
            if (n >= 1 && wv.C[size_t(n) - 1] == 0) REQUIRE(wv.S[size_t(n)] <= wv.S[size_t(n) - 1]);
        }
    }
}

TEST_CASE("monotonicity: extra mask never lowers downstream S or raises w") {
    WeightConfig cfg;
    Rng r(6);
    for (int rep = 0; rep < 300; ++rep) {
        int L = 3 + int(r.below(20));
        MaskPattern p;
        p.masked.resize(size_t(L));
        for (auto & m : p.masked) m = uint8_t(r.below(2));
        int i = int(r.below(uint64_t(L)));
        if (p.masked[size_t(i)]) continue;
        MaskPattern q = p;
        q.masked[size_t(i)] = 1;
        auto a = compute_weights(p, cfg), b = compute_weights(q, cfg);
        for (int n = i + 1; n < L; ++n) {
            REQUIRE(b.S[size_t(n)] >= a.S[size_t(n)] - 1e-15);
            REQUIRE(b.w[size_t(n)] <= a.w[size_t(n)] + 1e-15);
        }
    }
}
