#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <string>

#include "coopgen/errors.hpp"

namespace coopgen {

// Deterministic random stream. Wraps std::mt19937_64 (whose output sequence
// is fixed by the standard) and derives uniforms/normals with explicit
// arithmetic instead of std::*_distribution, which is implementation-defined.
// This is what makes checkpoints and logs bit-reproducible across compilers.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed = 0) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Modulo bias is negligible for n << 2^64.
    std::int64_t uniform_int(std::int64_t n) {
        if (n <= 0) throw Error("uniform_int: n must be positive");
        return static_cast<std::int64_t>(eng_() % static_cast<std::uint64_t>(n));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Independent child stream, e.g. one per chain or per data item.
    RngStream fork(std::uint64_t salt) {
        std::uint64_t x = next_u64() ^ (0x9e3779b97f4a7c15ULL * (salt + 1));
        // splitmix64 finalizer
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return RngStream(x);
    }

    // Text round trip: engine state (standard-defined format) plus the
    // Box-Muller spare encoded as raw bits.
    std::string serialize() const {
        std::ostringstream os;
        os << eng_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(spare_));
        std::memcpy(&bits, &spare_, sizeof(bits));
        os << bits;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        int spare_flag = 0;
        std::uint64_t bits = 0;
        is >> eng_ >> spare_flag >> bits;
        if (is.fail()) throw Error("RngStream: malformed serialized state");
        has_spare_ = spare_flag != 0;
        std::memcpy(&spare_, &bits, sizeof(spare_));
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace coopgen
