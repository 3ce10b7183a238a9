#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>

namespace bm {

// splitmix64, used to expand a master seed into stream states.
struct SplitMix64 {
    std::uint64_t s;

    explicit SplitMix64(std::uint64_t seed) : s(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (s += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
};

// xoshiro256++, reference constants. One instance per purpose-tagged stream.
struct Xoshiro256pp {
    std::array<std::uint64_t, 4> s{};

    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    void seed_with(std::uint64_t seed) {
        SplitMix64 sm(seed);
        for (auto& w : s) w = sm.next();
    }

    std::uint64_t next() {
        const std::uint64_t result = rotl(s[0] + s[3], 23) + s[0];
        const std::uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        return result;
    }
};

inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// A deterministic, purpose-tagged random stream. Streams with distinct tags
// are independent; the same (seed, tag) always reproduces the same sequence.
// The counter tracks how many 64-bit words have been consumed so that stream
// state can be persisted and restored exactly.
class RngStream {
public:
    RngStream() : RngStream(0, "default") {}

    RngStream(std::uint64_t master_seed, std::string purpose)
        : seed_(master_seed), tag_(std::move(purpose)) {
        gen_.seed_with(master_seed ^ fnv1a64(tag_));
    }

    std::uint64_t master_seed() const { return seed_; }
    const std::string& tag() const { return tag_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64() {
        ++counter_;
        return gen_.next();
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection-free modulo of a 64-bit draw is
    // biased for huge n; our n never exceeds 2^32 so draw from the high bits.
    std::uint64_t below(std::uint64_t n) {
        return next_u64() % n;
    }

    // Standard normal via Box-Muller; consumes exactly two uniforms per draw.
    double normal() {
        const double u1 = 1.0 - uniform(); // (0, 1], keeps the log finite
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stdev) { return mean + stdev * normal(); }

    struct State {
        std::array<std::uint64_t, 4> s;
        std::uint64_t counter;
    };

    State state() const { return {gen_.s, counter_}; }

    void restore(const State& st) {
        gen_.s = st.s;
        counter_ = st.counter;
    }

private:
    std::uint64_t seed_;
    std::string tag_;
    Xoshiro256pp gen_;
    std::uint64_t counter_ = 0;
};

} // namespace bm
