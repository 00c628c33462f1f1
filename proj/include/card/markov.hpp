#pragma once

#include "card/common.hpp"

#include <cmath>
#include <vector>

namespace card {

// First-order Markov chain over k symbols with a row-stochastic transition
// matrix, plus the closed-form quantities the analysis suite needs: the
// stationary distribution, the entropy rate, and the lag-d pairwise mutual
// information computed from matrix powers (no estimation bias).
struct MarkovChain {
    int k = 0;
    std::vector<double> P;  // row-major k*k, P[a*k + b] = P(b | a)

    MarkovChain() = default;
    MarkovChain(int k_, std::vector<double> p) : k(k_), P(std::move(p)) {
        CARD_CHECK(k >= 1 && P.size() == size_t(k) * size_t(k), "transition matrix shape mismatch");
        for (int a = 0; a < k; ++a) {
            double row = 0.0;
            for (int b = 0; b < k; ++b) {
                CARD_CHECK(P[a * k + b] >= 0.0, "transition probabilities must be non-negative");
                row += P[a * k + b];
            }
            CARD_CHECK(std::fabs(row - 1.0) <= 1e-9,
                       "transition row " + std::to_string(a) + " sums to " + std::to_string(row) + ", not 1");
        }
    }

    std::vector<double> matmul(const std::vector<double> & A, const std::vector<double> & B) const {
        std::vector<double> C(size_t(k) * size_t(k), 0.0);
        for (int a = 0; a < k; ++a)
            for (int c = 0; c < k; ++c) {
                double v = A[a * k + c];
                if (v == 0.0) continue;
                for (int b = 0; b < k; ++b) C[a * k + b] += v * B[c * k + b];
            }
        return C;
    }

    std::vector<double> power(int d) const {
        std::vector<double> R(size_t(k) * size_t(k), 0.0);
        for (int a = 0; a < k; ++a) R[a * k + a] = 1.0;
        for (int i = 0; i < d; ++i) R = matmul(R, P);
        return R;
    }

    // Ergodic here means: some power of P has all entries strictly positive
    // (irreducible and aperiodic), so a unique stationary distribution exists.
    bool ergodic() const {
        auto M = power(std::max(1, k * k));
        for (double v : M)
            if (!(v > 1e-300)) return false;
        return true;
    }

    // stationary distribution by power iteration; requires ergodic()
    std::vector<double> stationary() const {
        CARD_CHECK(ergodic(), "chain is not ergodic; no unique stationary distribution");
        std::vector<double> pi(size_t(k), 1.0 / k);
        std::vector<double> nxt(pi);
        for (int it = 0; it < 100000; ++it) {
            for (int b = 0; b < k; ++b) {
                double s = 0.0;
                for (int a = 0; a < k; ++a) s += pi[a] * P[a * k + b];
                nxt[b] = s;
            }
            double diff = 0.0;
            for (int b = 0; b < k; ++b) diff += std::fabs(nxt[b] - pi[b]);
            pi.swap(nxt);
            if (diff < 1e-15) break;
        }
        return pi;
    }

    // H = -sum_a pi_a sum_b P_ab ln P_ab, in nats
    double entropy_rate() const {
        auto pi = stationary();
        double h = 0.0;
        for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b) {
                double p = P[a * k + b];
                if (p > 0.0) h -= pi[a] * p * std::log(p);
            }
        return h;
    }

    // I(x_n; x_{n-d}) for the stationary chain, in nats
    double lag_mutual_information(int d) const {
        CARD_CHECK(d >= 1, "lag must be >= 1");
        auto pi = stationary();
        auto M  = power(d);
        double mi = 0.0;
        for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b) {
                double joint = pi[a] * M[a * k + b];
                if (joint > 0.0 && pi[b] > 0.0) mi += joint * std::log(M[a * k + b] / pi[b]);
            }
        return mi < 0.0 ? 0.0 : mi;  // clamp tiny negative rounding
    }
};

// Default source for the synthetic smoke corpus: two near-deterministic hops
// followed by a genuinely stochastic branch, so a trained model has both
// high-confidence and high-entropy predictions to make.
inline MarkovChain default_toy_chain() {
    return MarkovChain(3, {
        0.02, 0.96, 0.02,
        0.02, 0.02, 0.96,
        0.50, 0.30, 0.20,
    });
}

}  // namespace card
