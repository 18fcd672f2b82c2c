#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace metapool {

// Default seed for every CLI entry point. Fixed (not time-based) so repeated
// invocations reproduce byte-identical outputs.
inline constexpr std::uint64_t kDefaultSeed = 0xC0FFEEull;

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace detail

// Stable 64-bit mix used to derive independent substream seeds, e.g.
// hash_mix(seed, chain_index) or hash_mix(seed, scenario_hash, rep).
inline std::uint64_t hash_mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t state = a ^ (b * 0x9E3779B97F4A7C15ull);
    return detail::splitmix64(state);
}

inline std::uint64_t hash_mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return hash_mix(hash_mix(a, b), c);
}

// FNV-1a, for deriving substreams from string labels ("ppc", scenario ids).
inline std::uint64_t hash_str(std::string_view text) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001B3ull;
    }
    return h;
}

// xoshiro256++ with splitmix64 seeding. Self-contained so streams are
// reproducible bit-for-bit independent of the standard library's
// distribution implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = detail::splitmix64(sm);
    }

    // Independent stream addressed by (seed, path...). Identical paths give
    // identical streams; distinct paths give statistically independent ones.
    static Rng substream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
        std::uint64_t h = seed;
        for (std::uint64_t word : path) h = hash_mix(h, word);
        return Rng(h);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform on the open interval (0, 1).
    double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Marsaglia's polar method; one spare value cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, r2;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            r2 = u * u + v * v;
        } while (r2 >= 1.0 || r2 == 0.0);
        const double scale = std::sqrt(-2.0 * std::log(r2) / r2);
        spare_ = v * scale;
        has_spare_ = true;
        return u * scale;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Unbiased integer on [0, n) by rejection.
    std::uint64_t uniform_int(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t draw;
        do {
            draw = next_u64();
        } while (draw >= limit);
        return draw % n;
    }

    static constexpr const char* name() { return "xoshiro256++ (splitmix64 seeding)"; }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t state_[4] = {};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace metapool
