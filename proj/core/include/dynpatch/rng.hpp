#pragma once

#include <cstdint>
#include <string>

namespace dynpatch {

// Deterministic, platform-independent RNG (xoshiro256** seeded via splitmix64).
// std::<distribution> types are implementation-defined, so the distributions
// here are hand-rolled to keep artifacts reproducible across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed);

    uint64_t next_u64();

    // Uniform in [0, 1).
    double uniform();
    // Uniform in [lo, hi).
    double uniform(double lo, double hi);
    // Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi);
    // Standard normal via Box-Muller (cached second value).
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Independent child stream; stable under call-order changes elsewhere.
    Rng fork(uint64_t stream) const;

private:
    uint64_t s_[4];
    bool has_cached_ = false;
    double cached_ = 0.0;
};

// Stable seed derivation for named sub-streams (stage seeds, per-frame seeds).
uint64_t derive_seed(uint64_t master, const std::string& tag, uint64_t index = 0);

}  // namespace dynpatch
