#pragma once

#include <cmath>
#include <cstdint>

namespace pinv {

// Deterministic, self-contained generator (splitmix64 seeded xoshiro-style
// stream). Distribution code is hand-rolled so output is stable across
// standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        state_ = splitmix(seed + 0x9e3779b97f4a7c15ull);
    }

    // Derive an independent stream, e.g. per sample index.
    Rng stream(std::uint64_t id) const {
        return Rng(splitmix(state_ ^ (id * 0xbf58476d1ce4e5b9ull + 0x94d049bb133111ebull)));
    }

    std::uint64_t next_u64() {
        state_ = splitmix(state_);
        return state_;
    }

    // Uniform in [0,1).
    double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [lo, hi] inclusive.
    std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) {
        return lo + next_u64() % (hi - lo + 1);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    std::uint64_t state_;
    double spare_ = 0;
    bool have_spare_ = false;
};

}  // namespace pinv
