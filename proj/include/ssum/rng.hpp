#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "ssum/common.hpp"

namespace ssum {

// splitmix64 finalizer (Steele et al.).
constexpr u64 splitmix64_scramble(u64 z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Public seed-mixing function: derives the effective stream seed for
// (sample index, attempt counter) from a global seed. Every sampler in the
// project goes through this, so batch order and retry counts never change
// what an individual draw sees.
constexpr u64 mix_seed(u64 seed, u64 index, u64 attempt) {
    u64 z = seed;
    z ^= 0xA0761D6478BD642Full * (index + 1);
    z ^= 0xE7037ED1A0B428DBull * (attempt + 1);
    return splitmix64_scramble(z);
}

// Deterministic, portable PRNG (splitmix64 stream). std distributions are
// implementation-defined, so uniform/normal/categorical are done by hand.
class Rng {
  public:
    explicit Rng(u64 seed) : state_(seed) {}

    u64 next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        return splitmix64_scramble(state_);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    u64 below(u64 n) { return next_u64() % n; }

    // Standard normal via Box-Muller; the spare is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

    // Index draw from unnormalized non-negative weights.
    std::size_t categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (!(total > 0.0)) throw NumericError("categorical: weights sum to zero");
        double u = uniform() * total;
        double acc = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (u < acc) return i;
        }
        return weights.size() - 1;  // rounding tail
    }

  private:
    u64 state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace ssum
