#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "smarties/common.hpp"

namespace smarties {

// splitmix64 (Steele/Lea/Vigna). Used for seed mixing only.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= uint64_t(uint8_t(c));
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic PRNG for the whole project.
//
// Engine: std::mt19937_64, whose output sequence is fixed by the C++
// standard, so identical seeds give identical draws on every platform.
// Distributions are implemented here rather than via <random> adaptors,
// because the standard does not pin those down.
//
// Stream splitting: split(tag) derives a child seed as
// splitmix64(seed ^ splitmix64(tag)); children depend only on the parent's
// seed and the tag, never on how many draws the parent has made.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : seed_(seed), eng_(splitmix64(seed)) {}

    uint64_t seed() const { return seed_; }

    Rng split(uint64_t tag) const { return Rng(splitmix64(seed_ ^ splitmix64(tag))); }
    Rng split(std::string_view tag) const { return split(fnv1a64(tag)); }

    uint64_t next_u64() { return eng_(); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, bound) by rejection.
    uint64_t uniform_int(uint64_t bound) {
        if (bound == 0) throw InvariantError("uniform_int: zero bound");
        uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            uint64_t r = eng_();
            if (r >= threshold) return r % bound;
        }
    }

    // Standard normal via Box-Muller; draws two uniforms per call and keeps
    // no cached state so the draw sequence stays a pure function of the seed.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    template <class T>
    void fill_uniform(std::vector<T>& v, double lo, double hi) {
        for (auto& x : v) x = T(uniform(lo, hi));
    }

    template <class T>
    void fill_normal(std::vector<T>& v, double mean, double stddev) {
        for (auto& x : v) x = T(mean + stddev * normal());
    }

    // Fisher-Yates.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::vector<int> permutation(int n) {
        std::vector<int> p(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) p[size_t(i)] = i;
        shuffle(p);
        return p;
    }

    // Engine state as text (mt19937_64's standard stream format), for
    // checkpointing mid-sequence.
    std::string save_state() const {
        std::ostringstream os;
        os << seed_ << ' ' << eng_;
        return os.str();
    }

    static Rng restore_state(const std::string& s) {
        std::istringstream is(s);
        Rng r;
        is >> r.seed_ >> r.eng_;
        if (!is) throw DataError("malformed RNG state");
        return r;
    }

  private:
    uint64_t seed_;
    std::mt19937_64 eng_;
};

}  // namespace smarties
