#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace reqvae {

/// Deterministic random source built on std::mt19937_64.
///
/// The raw engine output is specified by the standard, so streams are
/// identical across platforms. Distribution shaping (uniform doubles,
/// normals) is done here explicitly instead of through <random>
/// distribution objects, whose output is implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    /// Substream derivation: mixes (seed, stream, counter) so that every
    /// step of a run draws from an independent, resumable stream.
    static Rng derive(uint64_t seed, uint64_t stream, uint64_t counter = 0) {
        uint64_t h = seed;
        h = splitmix(h ^ (0x9e3779b97f4a7c15ULL + stream));
        h = splitmix(h ^ (0xbf58476d1ce4e5b9ULL + counter));
        return Rng(h);
    }

    uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    int64_t uniform_int(int64_t lo, int64_t hi_inclusive) {
        return lo + static_cast<int64_t>(uniform_int(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    /// Standard normal via Box-Muller; caches the second deviate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// In-place Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<uint64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Draw an index from normalized weights.
    size_t weighted_index(const std::vector<double>& weights) {
        double u = uniform();
        double acc = 0.0;
        for (size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (u < acc) return i;
        }
        return weights.empty() ? 0 : weights.size() - 1;
    }

    std::string serialize_state() const {
        std::ostringstream os;
        os << engine_;
        if (has_spare_) os << " S " << spare_;
        return os.str();
    }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace reqvae
