// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace glam {

/// Counter-based pseudo-random stream. Output depends only on (seed, stream
/// key, draw counter), so identical call sequences reproduce bit-for-bit on
/// every platform, and the full state serializes as three integers.
class Rng {
public:
    Rng() : Rng(0) {}
    explicit Rng(uint64_t seed, uint64_t stream = 0)
        : seed_(seed), key_(derive_key(seed, stream)), counter_(0) {}

    /// Derive an independent substream. Forking does not advance this stream.
    Rng fork(uint64_t tag) const {
        Rng r;
        r.seed_ = seed_;
        r.key_ = derive_key(key_, tag ^ 0x9e3779b97f4a7c15ull);
        r.counter_ = 0;
        return r;
    }
    Rng fork(std::string_view name) const { return fork(fnv1a(name)); }

    uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n). n must be positive.
    uint64_t uniform_index(uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::uniform_index: n == 0");
        // 64-bit multiply-shift; bias is negligible for n << 2^64.
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    /// Standard normal via Box-Muller. Consumes two draws, keeps no cache,
    /// so the counter state fully determines the sequence.
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// Sample an index from unnormalized weights by CDF walk.
    template <class Real>
    int64_t categorical(std::span<const Real> weights) {
        double total = 0.0;
        for (Real w : weights) total += static_cast<double>(w);
        if (!(total > 0.0)) throw std::invalid_argument("Rng::categorical: nonpositive total weight");
        double r = uniform() * total;
        double acc = 0.0;
        for (size_t i = 0; i < weights.size(); ++i) {
            acc += static_cast<double>(weights[i]);
            if (r < acc) return static_cast<int64_t>(i);
        }
        return static_cast<int64_t>(weights.size()) - 1;
    }

    uint64_t seed() const { return seed_; }
    uint64_t key() const { return key_; }
    uint64_t counter() const { return counter_; }
    void restore(uint64_t key, uint64_t counter) {
        key_ = key;
        counter_ = counter;
    }

    static uint64_t fnv1a(std::string_view s) {
        uint64_t h = 0xcbf29ce484222325ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        return h;
    }

private:
    static uint64_t mix(uint64_t z) {
        // splitmix64 finalizer, applied twice for stronger decorrelation
        // between adjacent counters.
        for (int i = 0; i < 2; ++i) {
            z ^= z >> 30;
            z *= 0xbf58476d1ce4e5b9ull;
            z ^= z >> 27;
            z *= 0x94d049bb133111ebull;
            z ^= z >> 31;
        }
        return z;
    }
    static uint64_t derive_key(uint64_t seed, uint64_t stream) {
        return mix(mix(seed) ^ (stream * 0xda942042e4dd58b5ull + 1));
    }

    uint64_t seed_ = 0;
    uint64_t key_ = 0;
    uint64_t counter_ = 0;
};

}  // namespace glam
