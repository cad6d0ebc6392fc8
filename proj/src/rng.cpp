#include "mudd/rng.hpp"

#include <cmath>
#include <numbers>

namespace mudd {

namespace {

// splitmix64 finalizer; full-period integer mixing.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace

uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

RngState RngState::stream(std::string_view tag) const {
    return RngState(mix64(seed ^ mix64(fnv1a64(tag))), 0);
}

uint64_t rng_u64_at(uint64_t seed, uint64_t counter) {
    return mix64(mix64(seed) ^ mix64(counter * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull));
}

double rng_double_at(uint64_t seed, uint64_t counter) {
    return static_cast<double>(rng_u64_at(seed, counter) >> 11) * 0x1.0p-53;
}

double rng_normal_at(uint64_t seed, uint64_t counter) {
    // Box-Muller on two counter-indexed uniforms; u1 shifted away from 0.
    const double u1 = (static_cast<double>(rng_u64_at(seed, 2 * counter) >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = rng_double_at(seed, 2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

uint64_t RngState::next_u64() { return rng_u64_at(seed, counter++); }

double RngState::next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

uint64_t RngState::next_below(uint64_t n) {
    // Rejection sampling for an unbiased bounded draw.
    if (n == 0) return 0;
    const uint64_t limit = ~0ull - (~0ull % n);
    uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
}

double RngState::next_normal() {
    const double v = rng_normal_at(seed, counter);
    ++counter;
    return v;
}

}  // namespace mudd
