#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace owd {

// Deterministic random stream. All sampling goes through explicit arithmetic
// on the raw mt19937_64 output so two runs produce bit-identical streams
// (std::uniform_real_distribution makes no such guarantee across stdlibs).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) { return n ? gen_() % n : 0; }

    int uniform_int(int lo, int hi) {  // inclusive range
        return lo + static_cast<int>(uniform_index(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller (no cached second value: cheap and stateless).
    double gaussian() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    // The seed this stream was constructed with (not the current position).
    std::uint64_t raw_seed() const { return seed_; }

    // Independent child stream, e.g. per image id or per training step.
    Rng fork(std::uint64_t salt) const {
        std::uint64_t s = seed_ ^ (salt + 0x9e3779b97f4a7c15ULL + (seed_ << 6) + (seed_ >> 2));
        s ^= s >> 33;
        s *= 0xff51afd7ed558ccdULL;
        s ^= s >> 33;
        return Rng(s);
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
};

}  // namespace owd
