#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mhj {

// Seed plumbing. Every random decision in the library is driven by a stream
// seed derived from one top-level 64-bit seed through these helpers, so whole
// experiments replay bit-identically. std::mt19937_64 is fully specified by
// the standard; the uniform helpers below avoid std distributions, whose
// output is implementation-defined.

inline std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
    return mix64(seed + 0x9e3779b97f4a7c15ULL * (salt + 1));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
    return mix64(seed ^ mix64(fnv1a64(label)));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label, std::uint64_t salt) {
    return derive_seed(derive_seed(seed, label), salt);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1), 53 bits of mantissa.
    double next_unit() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    bool bernoulli(double p) { return next_unit() < p; }

    // Unbiased integer in [0, n). n must be >= 1.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t threshold = (0 - n) % n; // 2^64 mod n
        std::uint64_t r;
        do {
            r = eng_();
        } while (r < threshold);
        return r % n;
    }

    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo) + 1));
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

} // namespace mhj
