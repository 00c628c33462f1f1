#pragma once

#include "card/common.hpp"
#include "card/model.hpp"

#include <cmath>

namespace card {

// AdamW with bias correction and decoupled weight decay. Moments mirror the
// parameter registry shape-for-shape; `t` counts completed steps.
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int64_t t = 0;

    Params<float> m, v;

    AdamW() = default;
    AdamW(const ModelConfig & cfg, double b1, double b2, double wd)
        : beta1(b1), beta2(b2), weight_decay(wd), m(cfg), v(cfg) {}

    void step(Params<float> & params, const Params<float> & grads, double lr) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, double(t));
        const double bc2 = 1.0 - std::pow(beta2, double(t));
        auto ps = params.named();
        auto gs = grads.named();
        auto ms = m.named();
        auto vs = v.named();
        for (size_t a = 0; a < ps.size(); ++a) {
            float * p = ps[a].second->ptr();
            const float * g = gs[a].second->ptr();
            float * mm = ms[a].second->ptr();
            float * vv = vs[a].second->ptr();
            const int64_t n = ps[a].second->numel();
            for (int64_t i = 0; i < n; ++i) {
                mm[i] = float(beta1) * mm[i] + float(1.0 - beta1) * g[i];
                vv[i] = float(beta2) * vv[i] + float(1.0 - beta2) * g[i] * g[i];
                float mhat = mm[i] / float(bc1);
                float vhat = vv[i] / float(bc2);
                p[i] -= float(lr) * (mhat / (std::sqrt(vhat) + float(eps)) + float(weight_decay) * p[i]);
            }
        }
    }
};

// Scales all gradients so the global L2 norm is at most `clip`.
// Returns the pre-clip norm.
inline double clip_global_norm(Params<float> & grads, double clip) {
    double sq = 0.0;
    Params<float>::visit(grads, [&](const std::string &, const Tensor<float> & t) {
        for (float g : t.data) sq += double(g) * double(g);
    });
    double norm = std::sqrt(sq);
    if (clip > 0.0 && norm > clip) {
        float s = float(clip / norm);
        Params<float>::visit(grads, [&](const std::string &, Tensor<float> & t) {
            for (float & g : t.data) g *= s;
        });
    }
    return norm;
}

// ema <- d * ema + (1 - d) * params
inline void ema_update(Params<float> & ema, const Params<float> & params, double decay) {
    auto es = ema.named();
    auto ps = params.named();
    for (size_t a = 0; a < es.size(); ++a) {
        float * e = es[a].second->ptr();
        const float * p = ps[a].second->ptr();
        const int64_t n = es[a].second->numel();
        for (int64_t i = 0; i < n; ++i) e[i] = float(decay) * e[i] + float(1.0 - decay) * p[i];
    }
}

}  // namespace card
