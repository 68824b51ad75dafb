#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace emma {

// Error categories. The CLI maps each to a distinct exit code.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InputError : Error {      // rejected input (precondition violated)
    using Error::Error;
};
struct FormatError : Error {     // malformed file contents
    using Error::Error;
};
struct ShapeError : Error {      // incompatible dimensions
    using Error::Error;
};
struct ConfigError : Error {     // bad configuration
    using Error::Error;
};
struct IoError : Error {         // missing/unwritable files
    using Error::Error;
};
struct NumericError : Error {    // non-finite values where finite required
    using Error::Error;
};

// Deterministic RNG. std::mt19937_64 output is pinned by the standard, but the
// std distribution adaptors are not, so the mappings below are hand-rolled to
// keep every byte of a run reproducible across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform integer in [lo, hi], inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (hi < lo) throw InputError("uniform_int: empty range");
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<std::int64_t>(next_u64());  // full range
        // Rejection sampling to avoid modulo bias.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return lo + static_cast<std::int64_t>(x % span);
    }

    // Uniform double in [0, 1) with 53 bits of randomness.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; consumes two uniforms per pair, caches the second.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// Mirror (reflect-without-repeat) index fold onto [0, n-1]; handles any
// magnitude by the period-(2n-2) triangular wave. n == 1 collapses to 0.
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    int m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - m;
}

}  // namespace emma
