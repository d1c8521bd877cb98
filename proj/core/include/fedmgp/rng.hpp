#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace fedmgp {

// Seeded random stream. The generator core is std::mt19937_64 (bit-exact by
// the standard); all value mappings (uniform, normal, gamma, shuffle) are
// implemented here instead of via std::*_distribution, whose output is not
// pinned down by the standard and varies across library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Polar Box-Muller without caching the spare value, so the stream state
    // after a call depends only on the number of draws made.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        return mean + stddev * u * std::sqrt(-2.0 * std::log(s) / s);
    }

    // Marsaglia-Tsang; the alpha < 1 case uses the standard boost
    // gamma(a) = gamma(a+1) * U^(1/a).
    double gamma(double alpha) {
        if (alpha < 1.0) {
            const double g = gamma(alpha + 1.0);
            return g * std::pow(uniform_nonzero(), 1.0 / alpha);
        }
        const double d = alpha - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform_nonzero();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    // Gamma-ratio construction of a Dirichlet draw.
    std::vector<double> dirichlet(std::span<const double> alpha) {
        std::vector<double> draw(alpha.size());
        double total = 0.0;
        for (std::size_t i = 0; i < alpha.size(); ++i) {
            draw[i] = gamma(alpha[i]);
            total += draw[i];
        }
        for (double& x : draw) x /= total;
        return draw;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    double uniform_nonzero() {
        double u;
        do {
            u = uniform();
        } while (u == 0.0);
        return u;
    }

    std::mt19937_64 gen_;
};

// Stable seed derivation (splitmix64 chain) so that independent streams for
// (seed, client, task, ...) never overlap by construction.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = splitmix64(base);
    for (std::uint64_t p : path) s = splitmix64(s ^ p);
    return s;
}

}  // namespace fedmgp
