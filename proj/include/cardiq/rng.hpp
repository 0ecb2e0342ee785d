#pragma once

#include <cmath>
#include <cstdint>

namespace cardiq {

/// Deterministic, platform-independent random number generator.
///
/// std::normal_distribution is implementation-defined, so every stochastic
/// path in the project (phantom noise, weight init, VAE sampling, shuffles)
/// draws from this generator instead. SplitMix64 core, Box-Muller normals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    /// Integer uniform in [0, n) for n > 0.
    std::uint64_t uniform_index(std::uint64_t n) {
        return next_u64() % n;
    }

    /// Standard normal via Box-Muller; caches the second deviate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // Avoid log(0).
        while (u1 <= 0.0) u1 = uniform();
        double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return mag * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double sd) {
        return mean + sd * normal();
    }

    /// Derive an independent stream; distinct labels give distinct streams.
    Rng fork(std::uint64_t label) {
        std::uint64_t s = next_u64();
        return Rng(s ^ (0xA0761D6478BD642FULL * (label + 1)));
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace cardiq
