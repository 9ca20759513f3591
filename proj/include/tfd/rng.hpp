#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace tfd {

// Deterministic splitmix64 generator. std::mt19937 + <random> distributions
// are implementation-defined across standard libraries, so every sampler the
// toolkit relies on for reproducible artifacts lives here.
class Rng {
public:
    explicit Rng(uint64_t seed = 0x9e3779b97f4a7c15ull) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return double(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) {
        // rejection-free modulo is fine here; n is tiny vs 2^64
        return next_u64() % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller, one value per call (no cached spare so that the draw count
    // per pixel is fixed and seed-stable)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Knuth product method; large means are split via Poisson additivity so
    // exp(-lambda) stays well inside double range.
    long poisson(double lambda) {
        if (lambda <= 0.0) return 0;
        long total = 0;
        while (lambda > 30.0) {
            total += poisson_knuth_(30.0);
            lambda -= 30.0;
        }
        return total + poisson_knuth_(lambda);
    }

    // independent child stream
    Rng split() { return Rng(next_u64() ^ 0xd1b54a32d192ed03ull); }

private:
    long poisson_knuth_(double lambda) {
        const double limit = std::exp(-lambda);
        long k = 0;
        double p = 1.0;
        do {
            ++k;
            p *= uniform();
        } while (p > limit);
        return k - 1;
    }

    uint64_t state_;
};

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Stable per-item seed derivation: hash(master_seed, item_id).
inline uint64_t derive_seed(uint64_t master, std::string_view id) {
    uint64_t z = master ^ (fnv1a64(id) + 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

} // namespace tfd
