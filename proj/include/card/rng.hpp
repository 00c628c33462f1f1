#pragma once

#include <cmath>
#include <cstdint>

namespace card {

// Counter-based deterministic generator.
//
// Every draw is a pure function of (key, counter): value = mix(key ^ mix(counter))
// where mix is the SplitMix64 finalizer. Substreams are derived by folding
// stream labels into the key, so a value is fully determined by
// (seed, labels..., draw index) no matter what other streams were consumed.
// This is what makes batches, masks and splits reproducible and resumable:
// restoring a stream only needs its labels, never a serialized engine state.
struct Rng {
    uint64_t key     = 0;
    uint64_t counter = 0;

    static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

    static constexpr uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ULL;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBULL;
        z ^= z >> 31;
        return z;
    }

    static constexpr uint64_t fold(uint64_t key, uint64_t label) {
        return mix(key + kGamma * (label + 1));
    }

    explicit constexpr Rng(uint64_t seed = 0) : key(mix(seed + kGamma)) {}
    constexpr Rng(uint64_t seed, uint64_t s0) : Rng(seed) { key = fold(key, s0); }
    constexpr Rng(uint64_t seed, uint64_t s0, uint64_t s1) : Rng(seed, s0) { key = fold(key, s1); }
    constexpr Rng(uint64_t seed, uint64_t s0, uint64_t s1, uint64_t s2) : Rng(seed, s0, s1) { key = fold(key, s2); }

    uint64_t next_u64() { return mix(key ^ mix(counter++ + kGamma)); }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // unbiased integer in [0, n), n >= 1 (rejection on the biased tail)
    uint64_t below(uint64_t n) {
        uint64_t bound = ~uint64_t(0) - ~uint64_t(0) % n;
        uint64_t r;
        do {
            r = next_u64();
        } while (r >= bound);
        return r % n;
    }

    // standard normal via Box-Muller
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }
};

// Stream labels. Fixed numbers, not strings: they are part of the on-disk
// reproducibility contract (a checkpoint + seed must replay bit-identically).
namespace streams {
constexpr uint64_t init       = 1;   // parameter initialization
constexpr uint64_t data       = 2;   // batch index selection
constexpr uint64_t corrupt    = 3;   // per-example corruption + t
constexpr uint64_t split      = 4;   // train/validation assignment
constexpr uint64_t markov     = 5;   // synthetic corpus sampling
constexpr uint64_t val_corrupt = 6;  // fixed validation corruption
constexpr uint64_t perm       = 7;   // epoch-mode permutations
constexpr uint64_t analysis   = 8;   // Monte Carlo in the analysis suite
constexpr uint64_t decode     = 9;   // sampling during generation
}  // namespace streams

}  // namespace card
