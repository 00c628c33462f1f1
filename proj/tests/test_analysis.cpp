#include "card/analysis.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace card;

TEST_CASE("complexity: closed forms and orderings") {
    ComplexityReport r3 = complexity(3, 1);
    REQUIRE(r3.n_arm == 3);
    REQUIRE(r3.n_card == 7);
    REQUIRE(r3.n_mdlm == 12);

    REQUIRE(complexity(4, 2).n_bd3lm == 8);

    ComplexityReport r1 = complexity(1, 1);
    REQUIRE(r1.n_arm == 1);
    REQUIRE(r1.n_card == 1);
    REQUIRE(r1.n_bd3lm == 1);
    REQUIRE(r1.n_mdlm == 1);

    // exact big values far beyond 64 bits
    ComplexityReport big = complexity(128, 16);
    REQUIRE(big.n_card == (bigint(1) << 128) - 1);

    for (int L = 1; L <= 12; ++L) {
        for (int K = 1; K <= L; ++K) {
            if (L % K) continue;
            ComplexityReport r = complexity(L, K);
            REQUIRE(r.n_arm <= r.n_bd3lm);
            REQUIRE(r.n_bd3lm <= r.n_mdlm);
            REQUIRE(r.n_card == (bigint(1) << L) - 1);
        }
    }
    REQUIRE_THROWS(complexity(4, 3));
    REQUIRE_THROWS(complexity(0, 1));
}

TEST_CASE("brute-force context enumeration matches 2^L - 1") {
    REQUIRE(count_card_contexts_bruteforce(1) == 1);
    REQUIRE(count_card_contexts_bruteforce(3) == 7);
    REQUIRE(count_card_contexts_bruteforce(10) == 1023);
    for (int L = 1; L <= 12; ++L)
        REQUIRE(bigint(count_card_contexts_bruteforce(L)) == complexity(L, 1).n_card);
    REQUIRE_THROWS(count_card_contexts_bruteforce(17));
}

TEST_CASE("mi_retention: limits at t=0 and t=1, positive margin in between") {
    MarkovChain chain(2, {0.9, 0.1, 0.1, 0.9});
    auto rows = mi_retention(chain, 16, {0.0, 0.5, 1.0}, 2000, 1.25, 77);
    REQUIRE(rows.size() == 3);

    // t=0: uniform masks nothing (exactly full info), soft tail loses at most
    // the forced single mask near the end
    REQUIRE(rows[0].unif_mean == Catch::Approx(rows[0].full_info));
    REQUIRE(rows[0].unif_se == 0.0);
    REQUIRE(rows[0].soft_mean > 0.9 * rows[0].full_info);

    // t=1: everything masked, both retain exactly zero
    REQUIRE(rows[2].soft_mean == 0.0);
    REQUIRE(rows[2].unif_mean == 0.0);

    // t=0.5: soft tail wins by more than 3 standard errors
    REQUIRE(rows[1].margin > 3.0 * rows[1].margin_se);

    MarkovChain periodic(2, {0.0, 1.0, 1.0, 0.0});
    REQUIRE_THROWS(mi_retention(periodic, 16, {0.5}, 100, 1.25, 1));
}

TEST_CASE("continuity_profile: uniform flat, soft tail smooth, block jumps") {
    // uniform with t ~ U[0,1]: marginal 0.5 everywhere, adjacent diffs ~ 0
    CorruptionConfig unif;
    unif.strategy = MaskStrategy::uniform;
    ProfileReport u = continuity_profile(unif, 32, 20000, 5);
    for (size_t i = 0; i + 1 < u.marginal.size(); ++i)
        REQUIRE(std::fabs(u.adj_diff[i]) <= 4.0 * u.adj_se[i]);

    // soft tail at L=64: max adjacent difference <= 2/L + 4*SE
    CorruptionConfig soft;
    soft.strategy = MaskStrategy::soft_tail;
    soft.tail_lambda = 2.0;
    ProfileReport s = continuity_profile(soft, 64, 100000, 6);
    for (size_t i = 0; i < s.adj_diff.size(); ++i)
        REQUIRE(std::fabs(s.adj_diff[i]) <= 2.0 / 64.0 + 4.0 * s.adj_se[i]);
    // tail bias: late marginals exceed early ones
    REQUIRE(s.marginal[63] > s.marginal[0]);

    // block example at fixed t=0.5: 0.5 inside, 0 outside, O(1) boundary jump
    CorruptionConfig block;
    block.strategy = MaskStrategy::block;
    block.block_size = 16;
    ProfileReport b = continuity_profile(block, 64, 20000, 7, 0.5, 2);
    REQUIRE(std::fabs(b.block_jump - 0.5) <= 4.0 * b.block_jump_se);
    REQUIRE(b.marginal[0] == 0.0);
    REQUIRE(b.marginal[63] == 0.0);
    REQUIRE(b.marginal[20] == Catch::Approx(0.5).margin(0.02));
}

TEST_CASE("weight_bound_sweep: algebraic bound and damped gradients") {
    WeightConfig wcfg;
    ModelConfig mc;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.d_model = 16;
    mc.d_ff = 32;
    mc.max_len = 24;
    WeightSweepReport rep = weight_bound_sweep(wcfg, 16, 400, 4, mc, 8);
    REQUIRE(rep.max_ws < 1.0);
    REQUIRE(rep.positions == 400 * 16);
    REQUIRE(rep.bins[0].count > 0);
    // S = 0 bin keeps weight exactly 1/beta
    REQUIRE(rep.bins[0].mean_w == Catch::Approx(1.0));
    for (const auto & bin : rep.bins) {
        if (!bin.count) continue;
        REQUIRE(bin.mean_grad_weighted <= bin.mean_grad_unweighted + 1e-12);
    }
}
