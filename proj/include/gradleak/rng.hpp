#pragma once

#include <cmath>
#include <cstdint>

namespace gradleak {

// splitmix64-based generator. Self-contained so that streams are bit-identical
// across platforms and standard-library versions; std::normal_distribution and
// friends are implementation-defined and would break byte-exact reproducibility.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0,1) with 53 mantissa bits
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        // Box-Muller; u1 > 0 guaranteed by the +2^-54 nudge
        double u1 = uniform() + 0x1.0p-54;
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return mean + stddev * r * std::cos(a);
    }

    // resample until |z| <= 2 sigma, then scale
    double truncated_normal(double stddev) {
        double z = normal();
        while (z < -2.0 || z > 2.0) z = normal();
        return z * stddev;
    }

    // derive an independent stream deterministically from a label
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        return z ^ (z >> 31);
    }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace gradleak
