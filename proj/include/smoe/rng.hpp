#pragma once

#include <cmath>
#include <cstdint>

namespace smoe {

// Deterministic 64-bit generator (splitmix64 core). The same seed produces
// the same sequence on every platform, and every stochastic step in the
// project draws from an Rng, so results are reproducible bit-for-bit.
// Distributions are implemented here instead of <random> because the
// standard library distributions are not portable across implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be positive.
    int64_t uniform_int(int64_t n) { return int64_t(next_u64() % uint64_t(n)); }

    // Standard normal via Box-Muller; the second draw of each pair is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Derived generator with an independent stream, e.g. one per trajectory.
    Rng fork(uint64_t stream) const {
        Rng child(state_ ^ (0xA3EC647659359ACDULL * (stream + 1)));
        child.next_u64();
        return child;
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace smoe
