#pragma once

#include "card/common.hpp"
#include "card/corruption.hpp"
#include "card/model.hpp"
#include "card/weighting.hpp"

#include <string>
#include <vector>

namespace card {

// Builders for the four training paradigms. Every example is model-ready:
// input has the sequence-start token at row 0, targets/weights/supervision
// are aligned to token positions 1..L, and `shifted` selects the prediction
// convention (row n-1 scores token n when shifted, row n when not).

enum class Objective { arm, card, mdlm, bd3lm };

inline const char * to_string(Objective o) {
    switch (o) {
        case Objective::arm:   return "arm";
        case Objective::card:  return "card";
        case Objective::mdlm:  return "mdlm";
        case Objective::bd3lm: return "bd3lm";
    }
    return "?";
}

inline Objective objective_from(const std::string & s) {
    if (s == "arm")   return Objective::arm;
    if (s == "card")  return Objective::card;
    if (s == "mdlm")  return Objective::mdlm;
    if (s == "bd3lm") return Objective::bd3lm;
    throw usage_error("unknown objective '" + s + "'");
}

struct TrainingExample {
    std::vector<token_t> input;      // bos + (possibly noised) tokens
    std::vector<token_t> targets;    // clean tokens, length input.size()-1
    std::vector<float> weights;
    std::vector<uint8_t> supervision;
    AttnMode attn_mode = AttnMode::causal;
    int block_k = 0;
    bool shifted = true;
    double t = 0.0;
    MaskStrategy strategy = MaskStrategy::none;

    LossTarget<float> loss_target(Normalize norm = Normalize::count) const {
        return LossTarget<float>{targets, weights, supervision, shifted, norm};
    }
};

struct ObjectiveConfig {
    Objective objective = Objective::card;
    CorruptionConfig corruption{};   // card strategy (soft_tail by default)
    WeightConfig weighting{};
    double mdlm_eps = 0.01;          // t floor for the 1/t weights
    int bd3lm_block = 8;
    Normalize normalize = Normalize::count;
};

namespace detail {

inline std::vector<token_t> with_bos(const std::vector<token_t> & tokens) {
    std::vector<token_t> input;
    input.reserve(tokens.size() + 1);
    input.push_back(Vocab::bos_id);
    input.insert(input.end(), tokens.begin(), tokens.end());
    return input;
}

inline std::vector<uint8_t> non_pad_supervision(const std::vector<token_t> & x0) {
    std::vector<uint8_t> sup(x0.size(), 1);
    for (size_t i = 0; i < x0.size(); ++i)
        if (x0[i] == Vocab::pad_id) sup[i] = 0;
    return sup;
}

}  // namespace detail

inline TrainingExample build_arm(const std::vector<token_t> & x0) {
    TrainingExample ex;
    ex.input = detail::with_bos(x0);
    ex.targets = x0;
    ex.weights.assign(x0.size(), 1.0f);
    ex.supervision = detail::non_pad_supervision(x0);
    ex.attn_mode = AttnMode::causal;
    ex.shifted = true;
    ex.strategy = MaskStrategy::none;
    return ex;
}

// Soft-tail corruption, dense supervision with clean targets, context-aware
// weights computed from the realized mask.
inline TrainingExample build_card(const std::vector<token_t> & x0, const CorruptionConfig & ccfg,
                                  const WeightConfig & wcfg, Rng & rng) {
    const int L = int(x0.size());
    double t = ccfg.strategy == MaskStrategy::none ? 0.0 : sample_t(rng);
    MaskPattern pattern = draw_mask(ccfg, L, t, rng);
    WeightVector wv = compute_weights(pattern, wcfg);

    TrainingExample ex;
    ex.input = detail::with_bos(apply_mask(x0, pattern));
    ex.targets = x0;
    ex.weights.resize(size_t(L));
    for (int i = 0; i < L; ++i) ex.weights[size_t(i)] = float(wv.w[size_t(i)]);
    ex.supervision = detail::non_pad_supervision(x0);
    ex.attn_mode = AttnMode::causal;
    ex.shifted = true;
    ex.t = t;
    ex.strategy = ccfg.strategy;
    return ex;
}

// Bidirectional denoising: t ~ U(eps, 1], i.i.d. masking, loss only on masked
// positions with the linear-schedule weight 1/t, unshifted targets. Patterns
// with no masked position are resampled (the loss is undefined there).
inline TrainingExample build_mdlm(const std::vector<token_t> & x0, double eps, Rng & rng) {
    const int L = int(x0.size());
    CARD_CHECK(eps > 0.0 && eps < 1.0, "mdlm eps must be in (0, 1)");
    auto base_sup = detail::non_pad_supervision(x0);
    MaskPattern pattern;
    double t = 0.0;
    std::vector<uint8_t> sup;
    for (int attempt = 0; attempt < 10000; ++attempt) {
        t = eps + (1.0 - eps) * (1.0 - rng.uniform());  // (eps, 1]
        pattern = uniform_mask(L, t, rng);
        sup = base_sup;
        int n_sup = 0;
        for (int i = 0; i < L; ++i) {
            sup[size_t(i)] = uint8_t(sup[size_t(i)] && pattern.masked[size_t(i)]);
            n_sup += sup[size_t(i)];
        }
        if (n_sup > 0) break;
        sup.clear();
    }
    CARD_CHECK(!sup.empty(), "could not draw a non-empty mdlm mask");

    TrainingExample ex;
    ex.input = detail::with_bos(apply_mask(x0, pattern));
    ex.targets = x0;
    ex.weights.assign(size_t(L), float(1.0 / t));
    ex.supervision = std::move(sup);
    ex.attn_mode = AttnMode::full;
    ex.shifted = false;
    ex.t = t;
    ex.strategy = MaskStrategy::uniform;
    return ex;
}

// One example per block: clean history, i.i.d. noise inside block b only,
// supervision on the masked positions of block b. The input is truncated at
// the block end; later blocks are neither attended by supervised rows nor
// supervised themselves, which is what keeps the looped implementation's
// per-step cost profile.
inline std::vector<TrainingExample> build_bd3lm(const std::vector<token_t> & x0, int K, double eps, Rng & rng) {
    const int L = int(x0.size());
    CARD_CHECK(K >= 1 && L % K == 0, "bd3lm block size must divide L");
    auto base_sup = detail::non_pad_supervision(x0);
    std::vector<TrainingExample> out;
    const int n_blocks = L / K;
    for (int b = 1; b <= n_blocks; ++b) {
        MaskPattern pattern;
        double t = 0.0;
        std::vector<uint8_t> sup;
        for (int attempt = 0; attempt < 10000; ++attempt) {
            t = eps + (1.0 - eps) * (1.0 - rng.uniform());
            pattern = block_mask(L, t, K, b, rng);
            sup.assign(size_t(b) * size_t(K), 0);
            int n_sup = 0;
            for (int i = (b - 1) * K; i < b * K; ++i) {
                sup[size_t(i)] = uint8_t(base_sup[size_t(i)] && pattern.masked[size_t(i)]);
                n_sup += sup[size_t(i)];
            }
            if (n_sup > 0) break;
            sup.clear();
        }
        if (sup.empty()) continue;  // fully padded block

        const int Lb = b * K;
        std::vector<token_t> noised = apply_mask(x0, pattern);
        noised.resize(size_t(Lb));

        TrainingExample ex;
        ex.input = detail::with_bos(noised);
        ex.targets.assign(x0.begin(), x0.begin() + Lb);
        ex.weights.assign(size_t(Lb), float(1.0 / t));
        ex.supervision = std::move(sup);
        ex.attn_mode = AttnMode::block_causal;
        ex.block_k = K;
        ex.shifted = true;
        ex.t = t;
        ex.strategy = MaskStrategy::block;
        out.push_back(std::move(ex));
    }
    return out;
}

// Build the example(s) for one sequence under the configured objective.
inline std::vector<TrainingExample> build_examples(const ObjectiveConfig & cfg, const std::vector<token_t> & x0,
                                                   Rng & rng) {
    switch (cfg.objective) {
        case Objective::arm:   return {build_arm(x0)};
        case Objective::card:  return {build_card(x0, cfg.corruption, cfg.weighting, rng)};
        case Objective::mdlm:  return {build_mdlm(x0, cfg.mdlm_eps, rng)};
        case Objective::bd3lm: return build_bd3lm(x0, cfg.bd3lm_block, cfg.mdlm_eps, rng);
    }
    fail("unreachable");
}

// Loss (and gradients) for one sequence's example set; block examples are
// averaged so the per-sequence scale matches the single-example objectives.
template <bool WithGrad>
inline double sequence_loss_impl(const std::vector<TrainingExample> & exs, const Params<float> & P,
                                 Normalize norm, Workspace<float> & ws, Params<float> * grads) {
    CARD_CHECK(!exs.empty(), "no examples for sequence");
    const double scale = 1.0 / double(exs.size());
    double loss = 0.0;
    bool first = true;
    for (const auto & ex : exs) {
        auto lt = ex.loss_target(norm);
        if constexpr (WithGrad) {
            loss += loss_and_grad(P, std::span<const token_t>(ex.input), ex.attn_mode, ex.block_k, lt, ws,
                                  *grads, /*accumulate=*/!first, scale);
        } else {
            loss += scale * eval_loss(P, std::span<const token_t>(ex.input), ex.attn_mode, ex.block_k, lt, ws);
        }
        first = false;
    }
    return loss;
}

inline double sequence_loss(const std::vector<TrainingExample> & exs, const Params<float> & P, Normalize norm,
                            Workspace<float> & ws) {
    return sequence_loss_impl<false>(exs, P, norm, ws, nullptr);
}

inline double sequence_loss_and_grad(const std::vector<TrainingExample> & exs, const Params<float> & P,
                                     Normalize norm, Workspace<float> & ws, Params<float> & grads) {
    return sequence_loss_impl<true>(exs, P, norm, ws, &grads);
}

}  // namespace card
