#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace silobert {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace detail

/// Mixes a base seed with up to three stream indices. Used everywhere a
/// component needs an independent, replayable random stream (per silo,
/// per cycle, per dropout site).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t h = detail::splitmix64(base);
    h = detail::splitmix64(h ^ (a + 0x9E3779B97F4A7C15ULL));
    h = detail::splitmix64(h ^ (b + 0xC2B2AE3D27D4EB4FULL));
    h = detail::splitmix64(h ^ (c + 0x165667B19E3779F9ULL));
    return h;
}

/// Seeded generator with hand-rolled distributions so that sequences are
/// bit-stable across standard library implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n). n must be >= 1.
    std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller. One draw per call, no cached state.
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// Normal(0, stddev) rejected outside +/- clip_sigmas standard deviations.
    double truncated_normal(double stddev, double clip_sigmas = 2.0) {
        double z = normal();
        while (std::fabs(z) > clip_sigmas) z = normal();
        return z * stddev;
    }

    /// Fisher-Yates shuffle.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_int(i)]);
        }
    }

  private:
    std::mt19937_64 engine_;
};

}  // namespace silobert
