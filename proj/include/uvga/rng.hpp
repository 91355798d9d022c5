#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "uvga/tensor.hpp"

namespace uvga {

/// Seeded RNG with portable distributions. std::mt19937_64 output is
/// specified by the standard; the distribution transforms below are
/// hand-rolled so streams are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t bits() { return eng_(); }

    /// Uniform in [0,1).
    double uniform() { return static_cast<double>(bits() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Box rejection keeps it unbiased.
    std::uint64_t uniform_int(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = bits();
        } while (x >= limit);
        return x % n;
    }

    int index(int n) { return static_cast<int>(uniform_int(static_cast<std::uint64_t>(n))); }

    /// Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <class T>
    Tensor<T> normal_tensor(Shape s, double mean = 0.0, double stddev = 1.0) {
        Tensor<T> t(std::move(s));
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(normal(mean, stddev));
        return t;
    }

    template <class T>
    Tensor<T> uniform_tensor(Shape s, double lo = 0.0, double hi = 1.0) {
        Tensor<T> t(std::move(s));
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(uniform(lo, hi));
        return t;
    }

    /// Derive an independent stream; SplitMix64 scrambles the key.
    Rng fork(std::uint64_t key) {
        std::uint64_t z = key + 0x9e3779b97f4a7c15ULL + bits_static_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return Rng(bits() ^ (z ^ (z >> 31)));
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
    static constexpr std::uint64_t bits_static_ = 0x165667b19e3779f9ULL;
};

/// FNV-1a 64-bit, used for provenance hashes of byte blocks.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace uvga
