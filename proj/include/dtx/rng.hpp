#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace dtx {

// SplitMix64 mixing step, also used as a general-purpose hash combiner.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t seed, uint64_t v) {
    return mix64(seed ^ (v + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2)));
}

inline uint64_t hash_str(const std::string& s, uint64_t seed = 0) {
    uint64_t h = mix64(seed ^ 0x51ed270b0a1f3c49ULL);
    for (unsigned char c : s) h = mix64(h ^ c);
    return h;
}

// xoshiro256** with SplitMix64 seeding. All derived draws are specified
// here rather than delegating to <random> distributions, so streams are
// identical across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& si : s_) {
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            si = z ^ (z >> 31);
        }
    }

    uint64_t next() {
        auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
        uint64_t result = rotl(s_[1] * 5, 7) * 9;
        uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n); n > 0. Rejection-free modulo is fine at
    // these ranges given 64 bits of state per draw.
    uint64_t below(uint64_t n) { return next() % n; }

    // Standard normal via Box-Muller (one value per call, cached pair).
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices from [0, n), in selection order.
    std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = i;
        if (k > n) k = n;
        // partial Fisher-Yates
        for (size_t i = 0; i < k; ++i) {
            size_t j = i + static_cast<size_t>(below(n - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k);
        return idx;
    }

private:
    uint64_t s_[4];
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace dtx
