#pragma once

#include "card/common.hpp"
#include "card/corpus.hpp"
#include "card/model.hpp"
#include "card/objectives.hpp"
#include "card/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace card {

// Generation engines. Throughput accounting: `decode_forwards` counts the
// passes whose logits actually commit tokens (ARM's per-token passes, the
// block decoder's denoising iterations). The prompt prefill and the clean-KV
// refresh after a finished block keep the cache correct but commit nothing;
// they are reported separately so tokens_per_forward is K for a block that
// resolves in one iteration.

struct DecodeConfig {
    int block_k = 16;
    double tau = 0.9;          // confidence threshold on the max probability
    int t_max = 16;            // denoise-iteration cap per block
    int max_new_tokens = 64;
    double temperature = 0.0;  // 0 = greedy; confidence is always measured at temperature 1
    uint64_t seed = 42;        // only used when temperature > 0

    void validate() const {
        CARD_CHECK(block_k >= 1, "block_k must be >= 1");
        CARD_CHECK(tau >= 0.0, "tau must be >= 0");
        CARD_CHECK(t_max >= 1, "t_max must be >= 1");
        CARD_CHECK(max_new_tokens >= 0, "max_new_tokens must be >= 0");
        CARD_CHECK(temperature >= 0.0, "temperature must be >= 0");
    }
};

struct BlockTrace {
    int index = 0;
    int size = 0;
    int iterations = 0;
    std::vector<int> committed_per_iter;
    std::vector<double> confidences;  // per committed position, in position order
    int64_t positions_evaluated = 0;  // token-positions run through the network, refresh included
    int refresh_forwards = 0;
};

struct DecodeTrace {
    std::vector<BlockTrace> blocks;
    int64_t prompt_positions = 0;
    int prefill_forwards = 0;
    int64_t tokens = 0;
    int64_t decode_forwards = 0;
    bool truncated = false;

    double tokens_per_forward() const {
        return decode_forwards > 0 ? double(tokens) / double(decode_forwards) : 0.0;
    }
};

namespace detail {

inline int argmax_row(const float * row, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (row[i] > row[best]) best = i;
    return best;
}

inline double max_softmax_prob(const float * row, int n) {
    float m = row[0];
    for (int i = 1; i < n; ++i) m = std::max(m, row[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += std::exp(double(row[i] - m));
    return 1.0 / sum;  // exp(0) / sum
}

inline token_t pick_token(const float * row, int n, double temperature, Rng & rng) {
    if (temperature <= 0.0) return token_t(argmax_row(row, n));
    float m = row[0];
    for (int i = 1; i < n; ++i) m = std::max(m, row[i]);
    std::vector<double> p(size_t(n), 0.0);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        p[size_t(i)] = std::exp(double(row[i] - m) / temperature);
        sum += p[size_t(i)];
    }
    double u = rng.uniform() * sum, acc = 0.0;
    for (int i = 0; i < n; ++i) {
        acc += p[size_t(i)];
        if (u < acc) return token_t(i);
    }
    return token_t(n - 1);
}

}  // namespace detail

struct DecodeResult {
    std::vector<token_t> tokens;  // newly generated tokens (prompt excluded)
    DecodeTrace trace;
};

// Greedy autoregressive decoding, one token per cached forward.
inline DecodeResult decode_arm(const Params<float> & params, const std::vector<token_t> & prompt, int n_tokens,
                               double temperature = 0.0, uint64_t seed = 42) {
    CARD_CHECK(params.cfg.attn_mode == AttnMode::causal, "decoding requires a causal checkpoint");
    Workspace<float> ws(params.cfg);
    KVCache<float> cache(params.cfg);
    Rng rng(seed, streams::decode);

    std::vector<token_t> ids;
    ids.push_back(Vocab::bos_id);
    ids.insert(ids.end(), prompt.begin(), prompt.end());
    CARD_CHECK(int(ids.size()) < params.cfg.max_len, "prompt leaves no room to generate");

    DecodeResult res;
    int budget = std::min(n_tokens, params.cfg.max_len - int(ids.size()));
    res.trace.truncated = budget < n_tokens;
    if (budget <= 0) {
        res.trace.truncated = n_tokens > 0;
        return res;
    }

    Tensor<float> & l0 = forward_cached(params, cache, std::span<const token_t>(ids), true, ws);
    res.trace.prompt_positions = int64_t(ids.size());
    res.trace.prefill_forwards = 1;
    const int V = params.cfg.vocab_size;

    std::vector<float> row(l0.row(int(ids.size()) - 1), l0.row(int(ids.size()) - 1) + V);
    for (int i = 0; i < budget; ++i) {
        token_t tok = detail::pick_token(row.data(), V, temperature, rng);
        res.tokens.push_back(tok);
        ++res.trace.tokens;
        ++res.trace.decode_forwards;  // the pass that produced this row
        if (i + 1 < budget) {
            token_t next[1] = {tok};
            Tensor<float> & l = forward_cached(params, cache, std::span<const token_t>(next, 1), true, ws);
            row.assign(l.row(0), l.row(0) + V);
        }
    }
    return res;
}

// One confidence-threshold block. `last_row` holds the logits of the last
// cached row (the distribution for the block's first position); it is updated
// from the refresh pass that re-keys the cache with the final clean tokens.
inline BlockTrace decode_card_block(const Params<float> & params, KVCache<float> & cache,
                                    std::vector<float> & last_row, int block_size, const DecodeConfig & cfg,
                                    std::vector<token_t> & out_tokens, Workspace<float> & ws, Rng & rng) {
    const int V = params.cfg.vocab_size;
    BlockTrace bt;
    bt.size = block_size;
    bt.confidences.assign(size_t(block_size), 0.0);

    std::vector<token_t> cur(size_t(block_size), Vocab::mask_id);
    std::vector<uint8_t> committed(size_t(block_size), 0);
    int n_committed = 0;

    for (int iter = 1; iter <= cfg.t_max && n_committed < block_size; ++iter) {
        Tensor<float> & logits = forward_cached(params, cache, std::span<const token_t>(cur), false, ws);
        bt.positions_evaluated += block_size;
        bt.iterations = iter;
        const bool force = iter == cfg.t_max;

        // synchronous update: all decisions read this iteration's logits,
        // commits become visible as inputs at the next iteration
        int committed_now = 0;
        for (int r = 0; r < block_size; ++r) {
            if (committed[size_t(r)]) continue;
            const float * dist = r == 0 ? last_row.data() : logits.row(r - 1);
            double conf = detail::max_softmax_prob(dist, V);
            if (force || conf > cfg.tau) {
                cur[size_t(r)] = detail::pick_token(dist, V, cfg.temperature, rng);
                committed[size_t(r)] = 1;
                bt.confidences[size_t(r)] = conf;
                ++committed_now;
            }
        }
        bt.committed_per_iter.push_back(committed_now);
        n_committed += committed_now;
    }
    CARD_CHECK(n_committed == block_size, "block decode did not complete");

    // re-key the cache from the clean block so later blocks never attend to
    // stale mask-token representations
    Tensor<float> & refreshed = forward_cached(params, cache, std::span<const token_t>(cur), true, ws);
    bt.positions_evaluated += block_size;
    bt.refresh_forwards = 1;
    last_row.assign(refreshed.row(block_size - 1), refreshed.row(block_size - 1) + V);

    out_tokens.insert(out_tokens.end(), cur.begin(), cur.end());
    return bt;
}

// Confidence-based block generation: repeatedly append a block of mask
// tokens, denoise it, commit, and continue until the token budget is met.
inline DecodeResult generate(const Params<float> & params, const std::vector<token_t> & prompt,
                             const DecodeConfig & cfg) {
    cfg.validate();
    CARD_CHECK(params.cfg.attn_mode == AttnMode::causal, "decoding requires a causal checkpoint");
    Workspace<float> ws(params.cfg);
    KVCache<float> cache(params.cfg);
    Rng rng(cfg.seed, streams::decode);

    std::vector<token_t> ids;
    ids.push_back(Vocab::bos_id);
    ids.insert(ids.end(), prompt.begin(), prompt.end());
    CARD_CHECK(int(ids.size()) < params.cfg.max_len, "prompt leaves no room to generate");

    DecodeResult res;
    int budget = std::min(cfg.max_new_tokens, params.cfg.max_len - int(ids.size()));
    res.trace.truncated = budget < cfg.max_new_tokens;
    if (budget <= 0) return res;

    Tensor<float> & l0 = forward_cached(params, cache, std::span<const token_t>(ids), true, ws);
    res.trace.prompt_positions = int64_t(ids.size());
    res.trace.prefill_forwards = 1;
    const int V = params.cfg.vocab_size;
    std::vector<float> last_row(l0.row(int(ids.size()) - 1), l0.row(int(ids.size()) - 1) + V);

    int remaining = budget;
    int block_index = 0;
    while (remaining > 0) {
        int k = std::min(cfg.block_k, remaining);  // final block shrinks to the budget
        BlockTrace bt = decode_card_block(params, cache, last_row, k, cfg, res.tokens, ws, rng);
        bt.index = block_index++;
        res.trace.tokens += k;
        res.trace.decode_forwards += bt.iterations;
        res.trace.blocks.push_back(std::move(bt));
        remaining -= k;
    }
    return res;
}

// exp(mean token-level negative log-likelihood) under the causal model.
// arm and card share the evaluation; there is no incremental likelihood
// factorization to evaluate for the bidirectional objectives.
inline double eval_ppl(const Params<float> & params, const Dataset & ds, Objective mode, int threads = 0) {
    CARD_CHECK(mode == Objective::arm || mode == Objective::card,
               "perplexity is defined under the causal factorization (arm or card)");
    CARD_CHECK(params.cfg.attn_mode == AttnMode::causal, "perplexity needs a causal checkpoint");
    CARD_CHECK(!ds.empty(), "empty dataset");
    const int n = int(ds.size());
    if (threads <= 0) threads = default_threads();
    std::vector<Workspace<float>> ws;
    for (int i = 0; i < std::min(threads, n); ++i) ws.emplace_back(params.cfg);
    std::vector<double> nll(size_t(n), 0.0);
    std::vector<int64_t> cnt(size_t(n), 0);
    const int V = params.cfg.vocab_size;
    parallel_for_workers(n, int(ws.size()), [&](int64_t i, int w) {
        const auto & x0 = ds.seqs[size_t(i)];
        std::vector<token_t> input;
        input.reserve(x0.size() + 1);
        input.push_back(Vocab::bos_id);
        input.insert(input.end(), x0.begin(), x0.end());
        Tensor<float> & logits = forward(params, std::span<const token_t>(input), AttnMode::causal, 0, ws[size_t(w)]);
        double total = 0.0;
        int64_t c = 0;
        for (size_t p = 0; p < x0.size(); ++p) {
            if (x0[p] == Vocab::pad_id) continue;
            const float * row = logits.row(int(p));  // shifted: row p scores token p+1
            total += double(logsumexp(row, V) - row[x0[p]]);
            ++c;
        }
        nll[size_t(i)] = total;
        cnt[size_t(i)] = c;
    });
    double total = 0.0;
    int64_t count = 0;
    for (int i = 0; i < n; ++i) {
        total += nll[size_t(i)];
        count += cnt[size_t(i)];
    }
    CARD_CHECK(count > 0, "dataset has no scorable tokens");
    return std::exp(total / double(count));
}

}  // namespace card
