#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

namespace refdiff {

// Deterministic, fully specified RNG (xoshiro256++). Not std::mt19937 because the
// standard distributions are implementation-defined and the artifacts must be
// byte-reproducible.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& s : state_) s = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t      = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Multiply-shift; bias < 2^-53, irrelevant here.
    uint64_t below(uint64_t n) { return uint64_t(uniform() * double(n)); }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller. No cached spare so the state stays 4 words.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // Derive an independent child stream. Used for per-sample / per-step streams.
    Rng split(uint64_t a, uint64_t b = 0) const {
        uint64_t x = state_[0] ^ rotl(state_[1], 13) ^ rotl(a, 29) ^ rotl(b, 47);
        return Rng(splitmix64(x));
    }

    std::array<uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

private:
    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z          = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z          = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::array<uint64_t, 4> state_;
};

// FNV-1a, used for config hashing and tensor checksums.
inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace refdiff
