#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace ducisc {

// Seeded generator with portable draws. std::mt19937_64 output is fully
// specified by the standard; the distributions below are written out so that
// sequences do not depend on the standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n), rejection sampled.
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    std::int64_t between(std::int64_t lo, std::int64_t hi_inclusive) {
        return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    // Box-Muller; one draw per call (the second variate is discarded so the
    // stream position only depends on the number of calls).
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <class V>
    void shuffle(V& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k indices from [0, n): distinct when k <= n, otherwise with replacement.
    std::vector<std::size_t> choose(std::size_t n, std::size_t k) {
        std::vector<std::size_t> out;
        if (k <= n) {
            std::vector<std::size_t> pool(n);
            for (std::size_t i = 0; i < n; ++i) pool[i] = i;
            for (std::size_t i = 0; i < k; ++i) {
                const auto j = i + static_cast<std::size_t>(below(n - i));
                std::swap(pool[i], pool[j]);
                out.push_back(pool[i]);
            }
        } else {
            for (std::size_t i = 0; i < k; ++i) out.push_back(static_cast<std::size_t>(below(n)));
        }
        return out;
    }

    // Independent child stream, used to give every sample its own generator.
    Rng fork() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ULL); }

private:
    std::mt19937_64 engine_;
};

}  // namespace ducisc
