#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace docml {

// Deterministic random source. Distributions are hand-rolled on top of the
// raw mt19937_64 stream because std::*_distribution output is
// implementation-defined and would not be stable across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform integer in [0, n). n must be >= 1. The modulo bias is
    // negligible for the n used here (n << 2^64).
    std::uint64_t uniform(std::uint64_t n) { return gen_() % n; }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform_real() { return double(gen_() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1], safe as a log() argument.
    double uniform_real_pos() { return 1.0 - uniform_real(); }

    // Knuth's product-of-uniforms sampler; fine for small lambda.
    int poisson(double lambda) {
        const double limit = std::exp(-lambda);
        int k = 0;
        double p = 1.0;
        do {
            ++k;
            p *= uniform_real();
        } while (p > limit);
        return k - 1;
    }

    // Standard normal via Box-Muller.
    double gauss() {
        const double u1 = uniform_real_pos();
        const double u2 = uniform_real();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

private:
    std::mt19937_64 gen_;
};

// Stable derivation of per-(step,item) stream seeds from a run seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t x = a * 0x9e3779b97f4a7c15ULL ^ (b + 0xbf58476d1ce4e5b9ULL) * 0x94d049bb133111ebULL ^
                      (c + 0x2545f4914f6cdd1dULL) * 0xda942042e4dd58b5ULL;
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

} // namespace docml
