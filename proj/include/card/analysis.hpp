#pragma once

#include "card/common.hpp"
#include "card/corruption.hpp"
#include "card/markov.hpp"
#include "card/model.hpp"
#include "card/objectives.hpp"
#include "card/weighting.hpp"

#include <boost/multiprecision/cpp_int.hpp>

#include <cmath>
#include <set>
#include <string>
#include <vector>

namespace card {

using bigint = boost::multiprecision::cpp_int;

// ---- learnable-context counting ---------------------------------------------

// Closed forms for the number of distinct (position, context-state) pairs a
// paradigm can train on for one sequence of length L:
//   ARM: L        CARD: 2^L - 1      BD3LM: L * 2^(K-1)      MDLM: L * 2^(L-1)
struct ComplexityReport {
    int L = 0, K = 0;
    bigint n_arm, n_card, n_bd3lm, n_mdlm;
};

inline ComplexityReport complexity(int L, int K) {
    CARD_CHECK(L >= 1, "L must be >= 1");
    CARD_CHECK(K >= 1 && L % K == 0, "K must divide L");
    ComplexityReport r;
    r.L = L;
    r.K = K;
    r.n_arm = L;
    r.n_card = (bigint(1) << L) - 1;
    r.n_bd3lm = bigint(L) * (bigint(1) << (K - 1));
    r.n_mdlm = bigint(L) * (bigint(1) << (L - 1));
    return r;
}

// Independent oracle: literally enumerate, for every position, every mask
// assignment of its strict prefix, and count distinct (position, state) pairs.
inline uint64_t count_card_contexts_bruteforce(int L) {
    CARD_CHECK(L >= 1 && L <= 16, "bruteforce enumeration limited to L <= 16");
    std::set<uint64_t> seen;
    for (int n = 1; n <= L; ++n) {
        const uint64_t prefix_patterns = uint64_t(1) << (n - 1);
        for (uint64_t bits = 0; bits < prefix_patterns; ++bits)
            seen.insert(uint64_t(n) << 48 | bits);
    }
    return seen.size();
}

// ---- Prop 2: retained mutual information -------------------------------------

// Retained MI of a mask draw: sum over target positions n of the analytic
// pairwise MI to every unmasked position i < n. Computed from lag prefix sums,
// Monte Carlo over masks only.
struct MiRow {
    double t = 0.0;
    double soft_mean = 0.0, soft_se = 0.0;
    double unif_mean = 0.0, unif_se = 0.0;
    double margin = 0.0, margin_se = 0.0;
    double full_info = 0.0;
};

inline std::vector<MiRow> mi_retention(const MarkovChain & chain, int L, const std::vector<double> & ts,
                                       int n_samples, double lambda, uint64_t seed) {
    CARD_CHECK(L >= 2 && L <= 32, "mi_retention supports 2 <= L <= 32");
    CARD_CHECK(n_samples >= 2, "need at least 2 samples");
    CARD_CHECK(chain.ergodic(), "mi_retention requires an ergodic chain");

    // c[i] = sum over n > i of I(x_n; x_i) = cumulative lag MI up to L-1-i
    std::vector<double> cum(size_t(L), 0.0);  // cum[d] = sum_{e=1..d} MI(e)
    for (int d = 1; d < L; ++d) cum[size_t(d)] = cum[size_t(d) - 1] + chain.lag_mutual_information(d);
    std::vector<double> c(size_t(L), 0.0);
    double full = 0.0;
    for (int i = 0; i < L; ++i) {
        c[size_t(i)] = cum[size_t(L - 1 - i)];
        full += c[size_t(i)];
    }

    auto retained = [&](const MaskPattern & p) {
        double r = 0.0;
        for (int i = 0; i < L; ++i)
            if (!p.masked[size_t(i)]) r += c[size_t(i)];
        return r;
    };

    std::vector<MiRow> rows;
    for (size_t ti = 0; ti < ts.size(); ++ti) {
        const double t = ts[ti];
        double s_sum = 0.0, s_sq = 0.0, u_sum = 0.0, u_sq = 0.0;
        Rng rs(seed, streams::analysis, 2 * ti);
        Rng ru(seed, streams::analysis, 2 * ti + 1);
        for (int k = 0; k < n_samples; ++k) {
            double v = retained(soft_tail_mask(L, t, lambda, rs));
            s_sum += v;
            s_sq += v * v;
            v = retained(uniform_mask(L, t, ru));
            u_sum += v;
            u_sq += v * v;
        }
        MiRow row;
        row.t = t;
        row.full_info = full;
        row.soft_mean = s_sum / n_samples;
        row.unif_mean = u_sum / n_samples;
        double s_var = std::max(0.0, s_sq / n_samples - row.soft_mean * row.soft_mean);
        double u_var = std::max(0.0, u_sq / n_samples - row.unif_mean * row.unif_mean);
        row.soft_se = std::sqrt(s_var / n_samples);
        row.unif_se = std::sqrt(u_var / n_samples);
        row.margin = row.soft_mean - row.unif_mean;
        row.margin_se = std::sqrt(row.soft_se * row.soft_se + row.unif_se * row.unif_se);
        rows.push_back(row);
    }
    return rows;
}

// ---- Prop 3: per-position mask-marginal continuity ----------------------------

struct ProfileReport {
    int L = 0;
    int n_samples = 0;
    std::vector<double> marginal;   // per position
    std::vector<double> adj_diff;   // marginal[i+1] - marginal[i]
    std::vector<double> adj_se;     // SE of each adjacent difference
    double max_abs_adj_diff = 0.0;
    // block strategy only: jump at the boundary of the profiled block
    double block_jump = 0.0;
    double block_jump_se = 0.0;
    int block_index = 0;
};

// Estimates the per-position mask marginal. fixed_t < 0 draws t ~ U[0,1] per
// sample; the block strategy profiles a single block's example (block_index).
inline ProfileReport continuity_profile(const CorruptionConfig & cfg, int L, int n_samples, uint64_t seed,
                                        double fixed_t = -1.0, int block_index = 1) {
    CARD_CHECK(L >= 2, "L must be >= 2");
    CARD_CHECK(n_samples >= 2, "need at least 2 samples");
    std::vector<int64_t> counts(size_t(L), 0);
    Rng rng(seed, streams::analysis, 101);
    for (int k = 0; k < n_samples; ++k) {
        double t = fixed_t >= 0.0 ? fixed_t : rng.uniform();
        MaskPattern p = draw_mask(cfg, L, t, rng, block_index);
        for (int i = 0; i < L; ++i) counts[size_t(i)] += p.masked[size_t(i)];
    }
    ProfileReport r;
    r.L = L;
    r.n_samples = n_samples;
    r.block_index = block_index;
    r.marginal.resize(size_t(L));
    for (int i = 0; i < L; ++i) r.marginal[size_t(i)] = double(counts[size_t(i)]) / n_samples;
    auto se_of = [&](double m) { return m * (1.0 - m) / n_samples; };
    for (int i = 0; i + 1 < L; ++i) {
        double d = r.marginal[size_t(i) + 1] - r.marginal[size_t(i)];
        r.adj_diff.push_back(d);
        r.adj_se.push_back(std::sqrt(se_of(r.marginal[size_t(i)]) + se_of(r.marginal[size_t(i) + 1])));
        r.max_abs_adj_diff = std::max(r.max_abs_adj_diff, std::fabs(d));
    }
    if (cfg.strategy == MaskStrategy::block) {
        int start = (block_index - 1) * cfg.block_size;
        if (start > 0) {
            r.block_jump = r.marginal[size_t(start)] - r.marginal[size_t(start) - 1];
            r.block_jump_se = std::sqrt(se_of(r.marginal[size_t(start)]) + se_of(r.marginal[size_t(start) - 1]));
        } else {
            int end = cfg.block_size;  // first block: use the right boundary
            r.block_jump = r.marginal[size_t(end) - 1] - r.marginal[size_t(end)];
            r.block_jump_se = std::sqrt(se_of(r.marginal[size_t(end) - 1]) + se_of(r.marginal[size_t(end)]));
        }
    }
    return r;
}

// ---- Prop 1: weight bound and gradient-norm trend -----------------------------

struct WeightBin {
    double s_lo = 0.0, s_hi = 0.0;
    int64_t count = 0;
    double mean_w = 0.0;
    double mean_grad_weighted = 0.0;
    double mean_grad_unweighted = 0.0;
};

struct WeightSweepReport {
    double max_ws = 0.0;        // max over all positions of w_n * S_n, provably < 1
    int64_t positions = 0;
    std::vector<WeightBin> bins;
};

// Random mask ensembles (soft-tail and uniform, t ~ U[0,1]): checks the
// algebraic bound w*S < 1 everywhere and measures per-position gradient norms
// of the weighted vs unweighted loss on an untrained model, binned by S.
inline WeightSweepReport weight_bound_sweep(const WeightConfig & wcfg, int L, int n_patterns, int n_grad_seqs,
                                            const ModelConfig & mcfg, uint64_t seed) {
    CARD_CHECK(L >= 2 && n_patterns >= 1, "bad sweep parameters");
    // bin 0 is exactly S = 0 (clean prefix), the rest split the positive range
    const std::vector<double> edges = {0.0, 0.5, 1.0, 2.0, 4.0, 1e18};
    WeightSweepReport rep;
    rep.bins.resize(edges.size());
    rep.bins[0].s_lo = rep.bins[0].s_hi = 0.0;
    for (size_t b = 0; b + 1 < edges.size(); ++b) {
        rep.bins[b + 1].s_lo = edges[b];
        rep.bins[b + 1].s_hi = edges[b + 1];
    }
    std::vector<double> w_sum(rep.bins.size(), 0.0);
    auto bin_of = [&](double s) -> size_t {
        if (s == 0.0) return 0;
        for (size_t b = 0; b + 1 < edges.size(); ++b)
            if (s >= edges[b] && s < edges[b + 1]) return b + 1;
        return edges.size() - 1;
    };

    Rng rng(seed, streams::analysis, 201);
    for (int k = 0; k < n_patterns; ++k) {
        double t = rng.uniform();
        MaskPattern p = k % 2 == 0 ? soft_tail_mask(L, t, 2.0, rng) : uniform_mask(L, t, rng);
        WeightVector wv = compute_weights(p, wcfg);
        for (int i = 0; i < L; ++i) {
            rep.max_ws = std::max(rep.max_ws, wv.w[size_t(i)] * wv.S[size_t(i)]);
            size_t b = bin_of(wv.S[size_t(i)]);
            ++rep.bins[b].count;
            w_sum[b] += wv.w[size_t(i)];
            ++rep.positions;
        }
    }
    for (size_t b = 0; b < rep.bins.size(); ++b)
        rep.bins[b].mean_w = rep.bins[b].count ? w_sum[b] / double(rep.bins[b].count) : 0.0;

    // gradient norms on an untrained model, one supervised position at a time
    if (n_grad_seqs > 0) {
        ModelConfig mc = mcfg;
        CARD_CHECK(L + 1 <= mc.max_len, "sweep L does not fit the model");
        Params<float> params = init_params<float>(mc, seed);
        Params<float> grads(mc);
        Workspace<float> ws(mc);
        std::vector<double> gw(rep.bins.size(), 0.0), gu(rep.bins.size(), 0.0);
        std::vector<int64_t> gc(rep.bins.size(), 0);
        Rng grng(seed, streams::analysis, 202);
        for (int q = 0; q < n_grad_seqs; ++q) {
            std::vector<token_t> x0(size_t(L), 0);
            for (auto & tok : x0) tok = token_t(grng.below(uint64_t(std::min(mc.vocab_size, 256))));
            double t = grng.uniform();
            MaskPattern p = soft_tail_mask(L, t, 2.0, grng);
            WeightVector wv = compute_weights(p, wcfg);
            std::vector<token_t> input;
            input.push_back(Vocab::bos_id);
            for (size_t i = 0; i < x0.size(); ++i)
                input.push_back(p.masked[i] ? Vocab::mask_id : x0[i]);
            std::vector<uint8_t> sup(size_t(L), 0);
            std::vector<float> weights(size_t(L), 0.0f);
            for (int n = 0; n < L; ++n) {
                sup.assign(size_t(L), 0);
                sup[size_t(n)] = 1;
                auto grad_norm = [&](float wn) {
                    weights.assign(size_t(L), 0.0f);
                    weights[size_t(n)] = wn;
                    LossTarget<float> lt{x0, weights, sup, true, Normalize::count};
                    loss_and_grad(params, std::span<const token_t>(input), AttnMode::causal, 0, lt, ws, grads);
                    double sq = 0.0;
                    Params<float>::visit(grads, [&](const std::string &, const Tensor<float> & g) {
                        for (float v : g.data) sq += double(v) * double(v);
                    });
                    return std::sqrt(sq);
                };
                size_t b = bin_of(wv.S[size_t(n)]);
                gw[b] += grad_norm(float(wv.w[size_t(n)]));
                gu[b] += grad_norm(1.0f);
                ++gc[b];
            }
        }
        for (size_t b = 0; b < rep.bins.size(); ++b) {
            if (!gc[b]) continue;
            rep.bins[b].mean_grad_weighted = gw[b] / double(gc[b]);
            rep.bins[b].mean_grad_unweighted = gu[b] / double(gc[b]);
        }
    }
    return rep;
}

}  // namespace card
