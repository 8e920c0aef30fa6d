#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace tracto {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Mixes a base seed with stream identifiers (epoch, batch, example, ...) so
// that parallel workers draw from independent, scheduling-invariant streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t s = base;
    std::uint64_t out = splitmix64(s);
    s ^= a * 0x9e3779b97f4a7c15ull;
    out ^= splitmix64(s);
    s ^= b * 0xc2b2ae3d27d4eb4full;
    out ^= splitmix64(s);
    s ^= c * 0x165667b19e3779f9ull;
    out ^= splitmix64(s);
    return out;
}

// mt19937_64 with hand-rolled distributions. The standard pins down the
// engine but not the distributions, so uniform/normal are implemented here
// to keep results reproducible across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1) with 53 bits of precision
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n); Lemire's method
    std::uint64_t uniform_below(std::uint64_t n) {
        while (true) {
            std::uint64_t x = next_u64();
            __uint128_t m = static_cast<__uint128_t>(x) * n;
            std::uint64_t lo = static_cast<std::uint64_t>(m);
            if (lo < n) {
                std::uint64_t t = (-n) % n;
                if (lo < t) continue;
            }
            return static_cast<std::uint64_t>(m >> 64);
        }
    }

    // standard normal via Box-Muller, caching the second draw
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double t = 2.0 * M_PI * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Fisher-Yates with explicit draws (std::shuffle is implementation-defined).
template <typename T>
void shuffle_in_place(std::vector<T>& items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.uniform_below(i));
        std::swap(items[i - 1], items[j]);
    }
}

} // namespace tracto
