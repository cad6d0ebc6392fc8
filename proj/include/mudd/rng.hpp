#pragma once

#include <cstdint>
#include <string_view>

namespace mudd {

// Counter-based generator: every draw is a pure function of (seed, counter),
// so draw sequences are reproducible and independent of evaluation order.
// Streams derived from the same seed but different tags never collide in
// practice (64-bit mixed keys).
struct RngState {
    uint64_t seed = 0;
    uint64_t counter = 0;

    explicit RngState(uint64_t seed_ = 0, uint64_t counter_ = 0)
        : seed(seed_), counter(counter_) {}

    // Derive an independent stream for a named parameter or purpose.
    RngState stream(std::string_view tag) const;

    uint64_t next_u64();
    // Uniform in [0, 1).
    double next_double();
    // Uniform integer in [0, n).
    uint64_t next_below(uint64_t n);
    // Standard normal via Box-Muller; one value per call.
    double next_normal();
};

// Stateless draws: value at a given counter without mutating anything.
uint64_t rng_u64_at(uint64_t seed, uint64_t counter);
double rng_double_at(uint64_t seed, uint64_t counter);
double rng_normal_at(uint64_t seed, uint64_t counter);

uint64_t fnv1a64(std::string_view s);

}  // namespace mudd
