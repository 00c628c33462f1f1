#pragma once

#include "card/common.hpp"
#include "card/corpus.hpp"
#include "card/rng.hpp"
#include "card/tensor.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace card {

// Tiny pre-norm decoder stack: token + learned absolute position embeddings,
// [LN -> multi-head attention -> residual, LN -> SiLU MLP -> residual] x N,
// final LN, untied output head. No biases on projections, affine layer norms.
// Training math runs in float; the same code instantiates in double for the
// finite-difference gradient oracle.

enum class AttnMode { causal, full, block_causal };

inline const char * to_string(AttnMode m) {
    switch (m) {
        case AttnMode::causal:       return "causal";
        case AttnMode::full:         return "full";
        case AttnMode::block_causal: return "block_causal";
    }
    return "?";
}

inline AttnMode attn_mode_from(const std::string & s) {
    if (s == "causal")       return AttnMode::causal;
    if (s == "full")         return AttnMode::full;
    if (s == "block_causal") return AttnMode::block_causal;
    throw usage_error("unknown attention mode '" + s + "'");
}

struct ModelConfig {
    int n_layers   = 2;
    int n_heads    = 4;
    int d_model    = 64;
    int d_ff       = 256;
    int max_len    = 128;
    int vocab_size = Vocab::size;
    AttnMode attn_mode = AttnMode::causal;
    int block_k    = 8;  // block_causal only

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        CARD_CHECK(n_layers >= 1 && n_heads >= 1 && d_model >= 1 && d_ff >= 1, "bad model dims");
        CARD_CHECK(max_len >= 2 && vocab_size >= 2, "bad model dims");
        CARD_CHECK(d_model % n_heads == 0, "d_model must be divisible by n_heads");
        if (attn_mode == AttnMode::block_causal)
            CARD_CHECK(block_k >= 1 && block_k < max_len, "bad block_k");
    }
};

// All three modes reduce to a prefix mask: row i attends to columns [0, extent).
// Row 0 is the sequence-start token; in block_causal mode it forms its own
// block and data position i >= 1 belongs to block (i-1)/K.
inline int attn_extent(AttnMode mode, int block_k, int i, int S) {
    switch (mode) {
        case AttnMode::causal: return i + 1;
        case AttnMode::full:   return S;
        case AttnMode::block_causal: {
            if (i == 0) return 1;
            int block_end = 1 + ((i - 1) / block_k + 1) * block_k;
            return std::min(S, block_end);
        }
    }
    return S;
}

template <typename T>
struct LayerParams {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> wq, wk, wv, wo;   // each [d, d]
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> w1;               // [d, d_ff]
    Tensor<T> w2;               // [d_ff, d]
};

template <typename T>
struct Params {
    ModelConfig cfg;
    Tensor<T> tok_emb;          // [vocab, d]
    Tensor<T> pos_emb;          // [max_len, d]
    std::vector<LayerParams<T>> layers;
    Tensor<T> lnf_g, lnf_b;
    Tensor<T> head;             // [d, vocab]

    Params() = default;

    explicit Params(const ModelConfig & c) : cfg(c) {
        cfg.validate();
        tok_emb = Tensor<T>({cfg.vocab_size, cfg.d_model});
        pos_emb = Tensor<T>({cfg.max_len, cfg.d_model});
        layers.resize(size_t(cfg.n_layers));
        for (auto & l : layers) {
            l.ln1_g = Tensor<T>({cfg.d_model});
            l.ln1_b = Tensor<T>({cfg.d_model});
            l.wq = Tensor<T>({cfg.d_model, cfg.d_model});
            l.wk = Tensor<T>({cfg.d_model, cfg.d_model});
            l.wv = Tensor<T>({cfg.d_model, cfg.d_model});
            l.wo = Tensor<T>({cfg.d_model, cfg.d_model});
            l.ln2_g = Tensor<T>({cfg.d_model});
            l.ln2_b = Tensor<T>({cfg.d_model});
            l.w1 = Tensor<T>({cfg.d_model, cfg.d_ff});
            l.w2 = Tensor<T>({cfg.d_ff, cfg.d_model});
        }
        lnf_g = Tensor<T>({cfg.d_model});
        lnf_b = Tensor<T>({cfg.d_model});
        head  = Tensor<T>({cfg.d_model, cfg.vocab_size});
    }

    // Stable name -> array registry; the order defines checkpoint layout and
    // optimizer state alignment.
    template <typename Self, typename Fn>
    static void visit(Self & self, Fn && fn) {
        fn("tok_emb", self.tok_emb);
        fn("pos_emb", self.pos_emb);
        for (size_t i = 0; i < self.layers.size(); ++i) {
            std::string p = "layer" + std::to_string(i) + ".";
            auto & l = self.layers[i];
            fn(p + "ln1.g", l.ln1_g);
            fn(p + "ln1.b", l.ln1_b);
            fn(p + "attn.wq", l.wq);
            fn(p + "attn.wk", l.wk);
            fn(p + "attn.wv", l.wv);
            fn(p + "attn.wo", l.wo);
            fn(p + "ln2.g", l.ln2_g);
            fn(p + "ln2.b", l.ln2_b);
            fn(p + "ffn.w1", l.w1);
            fn(p + "ffn.w2", l.w2);
        }
        fn("final.ln.g", self.lnf_g);
        fn("final.ln.b", self.lnf_b);
        fn("head.w", self.head);
    }

    std::vector<std::pair<std::string, Tensor<T> *>> named() {
        std::vector<std::pair<std::string, Tensor<T> *>> out;
        visit(*this, [&](const std::string & n, Tensor<T> & t) { out.emplace_back(n, &t); });
        return out;
    }
    std::vector<std::pair<std::string, const Tensor<T> *>> named() const {
        std::vector<std::pair<std::string, const Tensor<T> *>> out;
        visit(*this, [&](const std::string & n, const Tensor<T> & t) { out.emplace_back(n, &t); });
        return out;
    }

    void zero_all() {
        visit(*this, [](const std::string &, Tensor<T> & t) { t.zero(); });
    }

    void add_scaled(const Params<T> & other, T alpha) {
        auto mine = named();
        auto theirs = other.named();
        CARD_CHECK(mine.size() == theirs.size(), "param registry mismatch");
        for (size_t i = 0; i < mine.size(); ++i)
            axpy(alpha, theirs[i].second->ptr(), mine[i].second->ptr(), mine[i].second->numel());
    }

    bool all_finite() const {
        bool ok = true;
        visit(*this, [&](const std::string &, const Tensor<T> & t) {
            for (T v : t.data)
                if (!std::isfinite(double(v))) ok = false;
        });
        return ok;
    }

    template <typename U>
    Params<U> cast() const {
        Params<U> out(cfg);
        auto src = named();
        auto dst = out.named();
        for (size_t i = 0; i < src.size(); ++i)
            for (int64_t j = 0; j < src[i].second->numel(); ++j)
                dst[i].second->data[size_t(j)] = U(src[i].second->data[size_t(j)]);
        return out;
    }
};

// Gaussian(0, 0.02) for embeddings, projections and the head; layer norm
// gains 1, biases 0. Values depend only on (seed, registry index, element).
template <typename T = float>
inline Params<T> init_params(const ModelConfig & cfg, uint64_t seed) {
    Params<T> p(cfg);
    uint64_t idx = 0;
    Params<T>::visit(p, [&](const std::string & name, Tensor<T> & t) {
        Rng rng(seed, streams::init, idx++);
        bool is_gain = name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
        bool is_bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
        for (auto & v : t.data) {
            if (is_gain)      v = T(1);
            else if (is_bias) v = T(0);
            else              v = T(0.02 * rng.normal());
        }
    });
    return p;
}

// ---- activation workspace --------------------------------------------------

template <typename T>
struct LayerActs {
    Tensor<T> ln1_hat, ln1_out;  // [S, d]
    Tensor<T> ln1_rstd;          // [S]
    Tensor<T> q, k, v;           // [S, d]
    Tensor<T> probs;             // [H, S, S]
    Tensor<T> att_cat;           // [S, d]
    Tensor<T> mid;               // [S, d]
    Tensor<T> ln2_hat, ln2_out;  // [S, d]
    Tensor<T> ln2_rstd;          // [S]
    Tensor<T> ffn_pre, ffn_act;  // [S, d_ff]
};

template <typename T>
struct Workspace {
    ModelConfig cfg;
    std::vector<Tensor<T>> xs;   // layer inputs, n_layers+1 of [S, d]
    std::vector<LayerActs<T>> acts;
    Tensor<T> lnf_hat, lnf_out;  // [S, d]
    Tensor<T> lnf_rstd;          // [S]
    Tensor<T> logits;            // [S, V]
    int S = 0;                   // rows of the last forward

    // backward scratch
    Tensor<T> dlogits;                    // [S, V]
    Tensor<T> dx, dmid, dln_out, datt_cat;  // [S, d]
    Tensor<T> dq, dk, dv;                 // [S, d]
    Tensor<T> dffn_pre, dffn_act;         // [S, d_ff]
    Tensor<T> score_row;                  // [max_len] scratch for cached attention

    explicit Workspace(const ModelConfig & c) : cfg(c) {
        cfg.validate();
        const int S_max = cfg.max_len, d = cfg.d_model, F = cfg.d_ff, H = cfg.n_heads, V = cfg.vocab_size;
        xs.resize(size_t(cfg.n_layers) + 1);
        for (auto & t : xs) t = Tensor<T>({S_max, d});
        acts.resize(size_t(cfg.n_layers));
        for (auto & a : acts) {
            a.ln1_hat = Tensor<T>({S_max, d});
            a.ln1_out = Tensor<T>({S_max, d});
            a.ln1_rstd = Tensor<T>({S_max});
            a.q = Tensor<T>({S_max, d});
            a.k = Tensor<T>({S_max, d});
            a.v = Tensor<T>({S_max, d});
            a.probs = Tensor<T>({H, S_max, S_max});
            a.att_cat = Tensor<T>({S_max, d});
            a.mid = Tensor<T>({S_max, d});
            a.ln2_hat = Tensor<T>({S_max, d});
            a.ln2_out = Tensor<T>({S_max, d});
            a.ln2_rstd = Tensor<T>({S_max});
            a.ffn_pre = Tensor<T>({S_max, F});
            a.ffn_act = Tensor<T>({S_max, F});
        }
        lnf_hat = Tensor<T>({S_max, d});
        lnf_out = Tensor<T>({S_max, d});
        lnf_rstd = Tensor<T>({S_max});
        logits = Tensor<T>({S_max, V});
        dlogits = Tensor<T>({S_max, V});
        dx = Tensor<T>({S_max, d});
        dmid = Tensor<T>({S_max, d});
        dln_out = Tensor<T>({S_max, d});
        datt_cat = Tensor<T>({S_max, d});
        dq = Tensor<T>({S_max, d});
        dk = Tensor<T>({S_max, d});
        dv = Tensor<T>({S_max, d});
        dffn_pre = Tensor<T>({S_max, F});
        dffn_act = Tensor<T>({S_max, F});
        score_row = Tensor<T>({S_max});
    }
};

namespace detail {

constexpr double kLnEps = 1e-5;

template <typename T>
inline void layernorm_fwd(const T * x, const T * g, const T * b, T * out, T * hat, T * rstd, int S, int d) {
    for (int i = 0; i < S; ++i) {
        const T * xr = x + size_t(i) * size_t(d);
        T mean = T(0);
        for (int c = 0; c < d; ++c) mean += xr[c];
        mean /= T(d);
        T var = T(0);
        for (int c = 0; c < d; ++c) {
            T dv = xr[c] - mean;
            var += dv * dv;
        }
        var /= T(d);
        T rs = T(1) / std::sqrt(var + T(kLnEps));
        rstd[i] = rs;
        T * hr = hat + size_t(i) * size_t(d);
        T * orow = out + size_t(i) * size_t(d);
        for (int c = 0; c < d; ++c) {
            hr[c] = (xr[c] - mean) * rs;
            orow[c] = g[c] * hr[c] + b[c];
        }
    }
}

// dx += LN backward; dg/db accumulated
template <typename T>
inline void layernorm_bwd(const T * dy, const T * hat, const T * rstd, const T * g,
                          T * dx, T * dg, T * db, int S, int d) {
    for (int i = 0; i < S; ++i) {
        const T * dyr = dy + size_t(i) * size_t(d);
        const T * hr  = hat + size_t(i) * size_t(d);
        T * dxr = dx + size_t(i) * size_t(d);
        T m1 = T(0), m2 = T(0);
        for (int c = 0; c < d; ++c) {
            T dh = dyr[c] * g[c];
            m1 += dh;
            m2 += dh * hr[c];
            dg[c] += dyr[c] * hr[c];
            db[c] += dyr[c];
        }
        m1 /= T(d);
        m2 /= T(d);
        T rs = rstd[i];
        for (int c = 0; c < d; ++c) {
            T dh = dyr[c] * g[c];
            dxr[c] += rs * (dh - m1 - hr[c] * m2);
        }
    }
}

template <typename T>
inline T silu(T x) {
    T s = T(1) / (T(1) + std::exp(-x));
    return x * s;
}

template <typename T>
inline T silu_grad(T x) {
    T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
}

}  // namespace detail

// Forward pass over a full input (sequence-start token already prepended by
// the caller). Returns logits [S, vocab]; activations stay in ws for backward.
template <typename T>
inline Tensor<T> & forward(const Params<T> & P, std::span<const token_t> ids, AttnMode mode, int block_k,
                           Workspace<T> & ws) {
    const ModelConfig & cfg = P.cfg;
    const int S = int(ids.size()), d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    const int F = cfg.d_ff, V = cfg.vocab_size;
    CARD_CHECK(S >= 1 && S <= cfg.max_len, "input length " + std::to_string(S) + " exceeds max_len");
    if (mode == AttnMode::block_causal)
        CARD_CHECK(block_k >= 1 && (S - 1) % block_k == 0, "block_k must divide the data length");
    ws.S = S;
    const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));

    // embeddings
    T * x0 = ws.xs[0].ptr();
    for (int i = 0; i < S; ++i) {
        token_t id = ids[size_t(i)];
        CARD_CHECK(id >= 0 && id < V, "token id out of range");
        const T * te = P.tok_emb.row(id);
        const T * pe = P.pos_emb.row(i);
        T * xr = x0 + size_t(i) * size_t(d);
        for (int c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto & L = P.layers[size_t(l)];
        auto & A = ws.acts[size_t(l)];
        const T * x = ws.xs[size_t(l)].ptr();

        detail::layernorm_fwd(x, L.ln1_g.ptr(), L.ln1_b.ptr(), A.ln1_out.ptr(), A.ln1_hat.ptr(),
                              A.ln1_rstd.ptr(), S, d);
        matmul(A.ln1_out.ptr(), L.wq.ptr(), A.q.ptr(), S, d, d);
        matmul(A.ln1_out.ptr(), L.wk.ptr(), A.k.ptr(), S, d, d);
        matmul(A.ln1_out.ptr(), L.wv.ptr(), A.v.ptr(), S, d, d);

        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            T * probs_h = A.probs.ptr() + size_t(h) * size_t(cfg.max_len) * size_t(cfg.max_len);
            for (int i = 0; i < S; ++i) {
                const int e = attn_extent(mode, block_k, i, S);
                const T * qi = A.q.row(i) + off;
                T * prow = probs_h + size_t(i) * size_t(cfg.max_len);
                for (int j = 0; j < e; ++j) {
                    const T * kj = A.k.row(j) + off;
                    T acc = T(0);
                    for (int c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                    prow[j] = acc * inv_sqrt_dh;
                }
                softmax_inplace(prow, e);
                T * orow = A.att_cat.row(i) + off;
                for (int c = 0; c < dh; ++c) orow[c] = T(0);
                for (int j = 0; j < e; ++j) {
                    const T pij = prow[j];
                    const T * vj = A.v.row(j) + off;
                    for (int c = 0; c < dh; ++c) orow[c] += pij * vj[c];
                }
            }
        }

        // attention projection + residual
        matmul(A.att_cat.ptr(), L.wo.ptr(), A.mid.ptr(), S, d, d);
        axpy(T(1), x, A.mid.ptr(), int64_t(S) * d);

        detail::layernorm_fwd(A.mid.ptr(), L.ln2_g.ptr(), L.ln2_b.ptr(), A.ln2_out.ptr(), A.ln2_hat.ptr(),
                              A.ln2_rstd.ptr(), S, d);
        matmul(A.ln2_out.ptr(), L.w1.ptr(), A.ffn_pre.ptr(), S, d, F);
        for (int64_t i = 0; i < int64_t(S) * F; ++i) A.ffn_act.data[size_t(i)] = detail::silu(A.ffn_pre.data[size_t(i)]);
        matmul(A.ffn_act.ptr(), L.w2.ptr(), ws.xs[size_t(l) + 1].ptr(), S, F, d);
        axpy(T(1), A.mid.ptr(), ws.xs[size_t(l) + 1].ptr(), int64_t(S) * d);
    }

    detail::layernorm_fwd(ws.xs[size_t(cfg.n_layers)].ptr(), P.lnf_g.ptr(), P.lnf_b.ptr(), ws.lnf_out.ptr(),
                          ws.lnf_hat.ptr(), ws.lnf_rstd.ptr(), S, d);
    matmul(ws.lnf_out.ptr(), P.head.ptr(), ws.logits.ptr(), S, d, V);
    return ws.logits;
}

enum class Normalize { count, weight_sum };

// Loss attachment for one example. Token position n (1-based, `targets[n-1]`)
// is scored by logits row n-1 when shifted (causal prediction) and by row n
// when not (bidirectional denoising); the input has the sequence-start token
// at row 0, so inputs are one longer than targets.
template <typename T>
struct LossTarget {
    std::span<const token_t> targets;
    std::span<const T> weights;
    std::span<const uint8_t> sup;
    bool shifted = true;
    Normalize normalize = Normalize::count;
};

namespace detail {

template <typename T>
inline double loss_denominator(const LossTarget<T> & lt) {
    double denom = 0.0;
    for (size_t n = 0; n < lt.sup.size(); ++n)
        if (lt.sup[n]) denom += lt.normalize == Normalize::count ? 1.0 : double(lt.weights[n]);
    CARD_CHECK(denom > 0.0, "no supervised positions: loss normalization undefined");
    return denom;
}

template <typename T>
inline void check_loss_target(int S, const LossTarget<T> & lt) {
    const size_t Lt = lt.targets.size();
    CARD_CHECK(Lt >= 1 && lt.weights.size() == Lt && lt.sup.size() == Lt, "loss target length mismatch");
    CARD_CHECK(int(Lt) + 1 == S, "targets must be one shorter than the model input");
    for (size_t n = 0; n < Lt; ++n) CARD_CHECK(lt.weights[n] >= T(0), "negative loss weight");
}

}  // namespace detail

// Forward + weighted cross entropy, no gradients.
template <typename T>
inline double eval_loss(const Params<T> & P, std::span<const token_t> ids, AttnMode mode, int block_k,
                        const LossTarget<T> & lt, Workspace<T> & ws) {
    Tensor<T> & logits = forward(P, ids, mode, block_k, ws);
    detail::check_loss_target(int(ids.size()), lt);
    const int V = P.cfg.vocab_size;
    const double denom = detail::loss_denominator(lt);
    double loss = 0.0;
    for (size_t n = 0; n < lt.targets.size(); ++n) {
        if (!lt.sup[n]) continue;
        const int row = lt.shifted ? int(n) : int(n) + 1;
        const T * lrow = logits.row(row);
        const token_t tgt = lt.targets[n];
        CARD_CHECK(tgt >= 0 && tgt < V, "target id out of range");
        T ce = logsumexp(lrow, V) - lrow[tgt];
        loss += double(lt.weights[n]) * double(ce);
    }
    return loss / denom;
}

// Forward + backward. Gradients are scaled by `scale` and either overwrite or
// accumulate into `grads`. Returns the (scaled) loss.
template <typename T>
inline double loss_and_grad(const Params<T> & P, std::span<const token_t> ids, AttnMode mode, int block_k,
                            const LossTarget<T> & lt, Workspace<T> & ws, Params<T> & grads,
                            bool accumulate = false, double scale = 1.0) {
    const ModelConfig & cfg = P.cfg;
    Tensor<T> & logits = forward(P, ids, mode, block_k, ws);
    detail::check_loss_target(int(ids.size()), lt);
    const int S = int(ids.size()), d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
    const int F = cfg.d_ff, V = cfg.vocab_size;
    const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));
    if (!accumulate) grads.zero_all();

    const double denom = detail::loss_denominator(lt);
    double loss = 0.0;

    // dlogits, only supervised rows are non-zero
    for (int i = 0; i < S; ++i) {
        T * dlr = ws.dlogits.row(i);
        for (int c = 0; c < V; ++c) dlr[c] = T(0);
    }
    for (size_t n = 0; n < lt.targets.size(); ++n) {
        if (!lt.sup[n]) continue;
        const int row = lt.shifted ? int(n) : int(n) + 1;
        const T * lrow = logits.row(row);
        const token_t tgt = lt.targets[n];
        CARD_CHECK(tgt >= 0 && tgt < V, "target id out of range");
        T lse = logsumexp(lrow, V);
        loss += double(lt.weights[n]) * double(lse - lrow[tgt]);
        const T coef = T(scale) * lt.weights[n] / T(denom);
        T * dlr = ws.dlogits.row(row);
        for (int c = 0; c < V; ++c) dlr[c] = coef * std::exp(lrow[c] - lse);
        dlr[tgt] -= coef;
    }
    loss = loss / denom * scale;

    // head and final norm
    matmul_tn_acc(ws.lnf_out.ptr(), ws.dlogits.ptr(), grads.head.ptr(), S, d, V);
    matmul_nt(ws.dlogits.ptr(), P.head.ptr(), ws.dln_out.ptr(), S, V, d);
    for (int64_t i = 0; i < int64_t(S) * d; ++i) ws.dx.data[size_t(i)] = T(0);
    detail::layernorm_bwd(ws.dln_out.ptr(), ws.lnf_hat.ptr(), ws.lnf_rstd.ptr(), P.lnf_g.ptr(), ws.dx.ptr(),
                          grads.lnf_g.ptr(), grads.lnf_b.ptr(), S, d);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto & L = P.layers[size_t(l)];
        auto & G = grads.layers[size_t(l)];
        auto & A = ws.acts[size_t(l)];

        // ws.dx currently holds d(xs[l+1])
        // FFN branch
        matmul_nt(ws.dx.ptr(), L.w2.ptr(), ws.dffn_act.ptr(), S, d, F);
        matmul_tn_acc(A.ffn_act.ptr(), ws.dx.ptr(), G.w2.ptr(), S, F, d);
        for (int64_t i = 0; i < int64_t(S) * F; ++i)
            ws.dffn_pre.data[size_t(i)] = ws.dffn_act.data[size_t(i)] * detail::silu_grad(A.ffn_pre.data[size_t(i)]);
        matmul_nt(ws.dffn_pre.ptr(), L.w1.ptr(), ws.dln_out.ptr(), S, F, d);
        matmul_tn_acc(A.ln2_out.ptr(), ws.dffn_pre.ptr(), G.w1.ptr(), S, d, F);

        // residual into mid, plus LN2 backward
        for (int64_t i = 0; i < int64_t(S) * d; ++i) ws.dmid.data[size_t(i)] = ws.dx.data[size_t(i)];
        detail::layernorm_bwd(ws.dln_out.ptr(), A.ln2_hat.ptr(), A.ln2_rstd.ptr(), L.ln2_g.ptr(), ws.dmid.ptr(),
                              G.ln2_g.ptr(), G.ln2_b.ptr(), S, d);

        // attention projection
        matmul_nt(ws.dmid.ptr(), L.wo.ptr(), ws.datt_cat.ptr(), S, d, d);
        matmul_tn_acc(A.att_cat.ptr(), ws.dmid.ptr(), G.wo.ptr(), S, d, d);

        // attention core
        for (int64_t i = 0; i < int64_t(S) * d; ++i) {
            ws.dq.data[size_t(i)] = T(0);
            ws.dk.data[size_t(i)] = T(0);
            ws.dv.data[size_t(i)] = T(0);
        }
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            const T * probs_h = A.probs.ptr() + size_t(h) * size_t(cfg.max_len) * size_t(cfg.max_len);
            for (int i = 0; i < S; ++i) {
                const int e = attn_extent(mode, block_k, i, S);
                const T * prow = probs_h + size_t(i) * size_t(cfg.max_len);
                const T * doi = ws.datt_cat.row(i) + off;
                // dp and the softmax jacobian, one row at a time
                T dot = T(0);
                T * drow = ws.score_row.ptr();
                for (int j = 0; j < e; ++j) {
                    const T * vj = A.v.row(j) + off;
                    T dp = T(0);
                    for (int c = 0; c < dh; ++c) dp += doi[c] * vj[c];
                    drow[j] = dp;
                    dot += dp * prow[j];
                }
                const T * qi = A.q.row(i) + off;
                T * dqi = ws.dq.row(i) + off;
                for (int j = 0; j < e; ++j) {
                    const T pij = prow[j];
                    const T ds = pij * (drow[j] - dot) * inv_sqrt_dh;
                    const T * kj = A.k.row(j) + off;
                    T * dkj = ws.dk.row(j) + off;
                    T * dvj = ws.dv.row(j) + off;
                    for (int c = 0; c < dh; ++c) {
                        dqi[c] += ds * kj[c];
                        dkj[c] += ds * qi[c];
                        dvj[c] += pij * doi[c];
                    }
                }
            }
        }

        // back through the q/k/v projections into ln1_out
        matmul_nt(ws.dq.ptr(), L.wq.ptr(), ws.dln_out.ptr(), S, d, d);
        matmul_tn_acc(A.ln1_out.ptr(), ws.dq.ptr(), G.wq.ptr(), S, d, d);
        matmul_nt(ws.dk.ptr(), L.wk.ptr(), ws.datt_cat.ptr(), S, d, d);  // reuse buffer
        axpy(T(1), ws.datt_cat.ptr(), ws.dln_out.ptr(), int64_t(S) * d);
        matmul_tn_acc(A.ln1_out.ptr(), ws.dk.ptr(), G.wk.ptr(), S, d, d);
        matmul_nt(ws.dv.ptr(), L.wv.ptr(), ws.datt_cat.ptr(), S, d, d);
        axpy(T(1), ws.datt_cat.ptr(), ws.dln_out.ptr(), int64_t(S) * d);
        matmul_tn_acc(A.ln1_out.ptr(), ws.dv.ptr(), G.wv.ptr(), S, d, d);

        // LN1 backward; residual carries dmid into the layer input
        for (int64_t i = 0; i < int64_t(S) * d; ++i) ws.dx.data[size_t(i)] = ws.dmid.data[size_t(i)];
        detail::layernorm_bwd(ws.dln_out.ptr(), A.ln1_hat.ptr(), A.ln1_rstd.ptr(), L.ln1_g.ptr(), ws.dx.ptr(),
                              G.ln1_g.ptr(), G.ln1_b.ptr(), S, d);
    }

    // embeddings
    for (int i = 0; i < S; ++i) {
        const T * dxr = ws.dx.row(i);
        T * te = grads.tok_emb.row(ids[size_t(i)]);
        T * pe = grads.pos_emb.row(i);
        for (int c = 0; c < d; ++c) {
            te[c] += dxr[c];
            pe[c] += dxr[c];
        }
    }
    return loss;
}

// ---- KV cache ----------------------------------------------------------------

// Per-layer key/value arrays of a committed prefix. Appends never mutate
// earlier rows; only causal checkpoints may use the cache (there is no valid
// incremental evaluation under full attention).
template <typename T>
struct KVCache {
    ModelConfig cfg;
    int n = 0;
    std::vector<Tensor<T>> k, v;  // per layer [max_len, d]

    explicit KVCache(const ModelConfig & c) : cfg(c) {
        k.reserve(size_t(cfg.n_layers));
        v.reserve(size_t(cfg.n_layers));
        for (int l = 0; l < cfg.n_layers; ++l) {
            k.emplace_back(std::vector<int>{cfg.max_len, cfg.d_model});
            v.emplace_back(std::vector<int>{cfg.max_len, cfg.d_model});
        }
    }
};

// Incremental forward over `ids` appended after the cached prefix. Logits are
// returned for the new rows only; with commit=true the new keys/values are
// appended to the cache. Row-for-row this matches the uncached causal forward
// over the concatenated sequence.
template <typename T>
inline Tensor<T> & forward_cached(const Params<T> & P, KVCache<T> & cache, std::span<const token_t> ids,
                                  bool commit, Workspace<T> & ws) {
    const ModelConfig & cfg = P.cfg;
    CARD_CHECK(cfg.attn_mode == AttnMode::causal, "KV cache requires a causal checkpoint");
    const int m = int(ids.size()), base = cache.n;
    const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim(), F = cfg.d_ff, V = cfg.vocab_size;
    CARD_CHECK(m >= 1 && base + m <= cfg.max_len, "cache overflow: prefix + new tokens exceed max_len");
    ws.S = m;
    const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));

    T * x0 = ws.xs[0].ptr();
    for (int i = 0; i < m; ++i) {
        token_t id = ids[size_t(i)];
        CARD_CHECK(id >= 0 && id < V, "token id out of range");
        const T * te = P.tok_emb.row(id);
        const T * pe = P.pos_emb.row(base + i);
        T * xr = x0 + size_t(i) * size_t(d);
        for (int c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto & L = P.layers[size_t(l)];
        auto & A = ws.acts[size_t(l)];
        const T * x = ws.xs[size_t(l)].ptr();

        detail::layernorm_fwd(x, L.ln1_g.ptr(), L.ln1_b.ptr(), A.ln1_out.ptr(), A.ln1_hat.ptr(),
                              A.ln1_rstd.ptr(), m, d);
        matmul(A.ln1_out.ptr(), L.wq.ptr(), A.q.ptr(), m, d, d);
        matmul(A.ln1_out.ptr(), L.wk.ptr(), A.k.ptr(), m, d, d);
        matmul(A.ln1_out.ptr(), L.wv.ptr(), A.v.ptr(), m, d, d);

        const Tensor<T> & ck = cache.k[size_t(l)];
        const Tensor<T> & cv = cache.v[size_t(l)];
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            for (int i = 0; i < m; ++i) {
                const int e = base + i + 1;  // causal over prefix + local rows
                const T * qi = A.q.row(i) + off;
                T * srow = ws.score_row.ptr();
                for (int j = 0; j < e; ++j) {
                    const T * kj = (j < base ? ck.row(j) : A.k.row(j - base)) + off;
                    T acc = T(0);
                    for (int c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                    srow[j] = acc * inv_sqrt_dh;
                }
                softmax_inplace(srow, e);
                T * orow = A.att_cat.row(i) + off;
                for (int c = 0; c < dh; ++c) orow[c] = T(0);
                for (int j = 0; j < e; ++j) {
                    const T pij = srow[j];
                    const T * vj = (j < base ? cv.row(j) : A.v.row(j - base)) + off;
                    for (int c = 0; c < dh; ++c) orow[c] += pij * vj[c];
                }
            }
        }

        matmul(A.att_cat.ptr(), L.wo.ptr(), A.mid.ptr(), m, d, d);
        axpy(T(1), x, A.mid.ptr(), int64_t(m) * d);
        detail::layernorm_fwd(A.mid.ptr(), L.ln2_g.ptr(), L.ln2_b.ptr(), A.ln2_out.ptr(), A.ln2_hat.ptr(),
                              A.ln2_rstd.ptr(), m, d);
        matmul(A.ln2_out.ptr(), L.w1.ptr(), A.ffn_pre.ptr(), m, d, F);
        for (int64_t i = 0; i < int64_t(m) * F; ++i) A.ffn_act.data[size_t(i)] = detail::silu(A.ffn_pre.data[size_t(i)]);
        matmul(A.ffn_act.ptr(), L.w2.ptr(), ws.xs[size_t(l) + 1].ptr(), m, F, d);
        axpy(T(1), A.mid.ptr(), ws.xs[size_t(l) + 1].ptr(), int64_t(m) * d);

        if (commit) {
            Tensor<T> & mk = cache.k[size_t(l)];
            Tensor<T> & mv = cache.v[size_t(l)];
            for (int i = 0; i < m; ++i) {
                for (int c = 0; c < d; ++c) {
                    mk.row(base + i)[c] = A.k.row(i)[c];
                    mv.row(base + i)[c] = A.v.row(i)[c];
                }
            }
        }
    }

    detail::layernorm_fwd(ws.xs[size_t(cfg.n_layers)].ptr(), P.lnf_g.ptr(), P.lnf_b.ptr(), ws.lnf_out.ptr(),
                          ws.lnf_hat.ptr(), ws.lnf_rstd.ptr(), m, d);
    matmul(ws.lnf_out.ptr(), P.head.ptr(), ws.logits.ptr(), m, d, V);
    if (commit) cache.n += m;
    return ws.logits;
}

}  // namespace card
