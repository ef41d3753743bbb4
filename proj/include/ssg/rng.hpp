#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ssg {

/// SplitMix64 stream. Every draw is plain integer arithmetic, so the
/// uniform sequence is identical on any platform.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // [-1, 1)
    double symmetric() { return 2.0 * uniform() - 1.0; }

    std::uint64_t below(std::uint64_t n) { return next() % n; }

    // Box-Muller; the cached second value is discarded to keep the stream
    // position a simple function of the number of calls.
    double normal() {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::uint64_t state_;
};

}  // namespace ssg
