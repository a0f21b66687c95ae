#pragma once

#include <cstdint>
#include <random>

namespace gmfpca {

// splitmix64 step; used to derive well-separated seeds from (seed, stream ids).
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d4a2b2f712b2b9ULL;
    return z ^ (z >> 31);
}

// Deterministic stream seed from a base seed and up to three stream indices
// (e.g. replicate, chain, group). Same inputs always give the same stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t s1 = 0,
                                 std::uint64_t s2 = 0, std::uint64_t s3 = 0) {
    std::uint64_t st = base;
    std::uint64_t h = splitmix64(st);
    st ^= s1 + 0x9e3779b97f4a7c15ULL;
    h ^= splitmix64(st);
    st ^= (s2 << 1) + 0x2545f4914f6cdd1dULL;
    h ^= splitmix64(st);
    st ^= (s3 << 2) + 0x1b873593ULL;
    h ^= splitmix64(st);
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform() { return unif_(gen_); }
    double uniform(double a, double b) { return a + (b - a) * unif_(gen_); }
    double normal() { return norm_(gen_); }
    double normal(double mean, double sd) { return mean + sd * norm_(gen_); }

    // Gamma(shape, rate); mean = shape / rate.
    double gamma(double shape, double rate) {
        std::gamma_distribution<double> d(shape, 1.0 / rate);
        return d(gen_);
    }

    // Inverse-gamma(shape, scale): 1/X with X ~ Gamma(shape, rate = scale).
    double inverse_gamma(double shape, double scale) {
        double g = gamma(shape, scale);
        return 1.0 / g;
    }

    int bernoulli(double p) { return unif_(gen_) < p ? 1 : 0; }

    long poisson(double mean) {
        std::poisson_distribution<long> d(mean);
        return d(gen_);
    }

    // Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) {
        std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
        return d(gen_);
    }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
    std::uniform_real_distribution<double> unif_{0.0, 1.0};
    std::normal_distribution<double> norm_{0.0, 1.0};
};

} // namespace gmfpca
