#pragma once

#include <cmath>
#include <cstdint>

#include "mflt/common.hpp"

namespace mflt {

// Counter-based randomness: every consumer derives an independent stream from
// (seed, stream tag, up to three key words). Draws therefore do not depend on
// scheduling, thread count, or checkpoint/resume boundaries.

inline constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

enum class Stream : std::uint64_t {
    Init = 0x11,      // particle initialization
    MflNoise = 0x22,  // Langevin noise per (iteration, timepoint, particle)
    Skeleton = 0x33,  // path skeleton sampling per path id
    Bridge = 0x44,    // Brownian-bridge interpolation per path id
    Sim = 0x55,       // SDE simulation per (particle, step)
    Extract = 0x66,   // snapshot subsampling per timepoint
};

class CounterRng {
public:
    CounterRng(std::uint64_t seed, Stream stream, std::uint64_t a = 0, std::uint64_t b = 0,
               std::uint64_t c = 0) {
        std::uint64_t h = mix64(seed);
        h = mix64(h ^ static_cast<std::uint64_t>(stream));
        h = mix64(h ^ a);
        h = mix64(h ^ b);
        h = mix64(h ^ c);
        state_ = h;
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in (0, 1]; never 0 so log() is safe
    double next_uniform() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    // standard normal via Box-Muller; pairs are cached
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = next_uniform();
        const double u2 = next_uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    RowVec normal_row(int d) {
        RowVec z(d);
        for (int i = 0; i < d; ++i) z[i] = next_normal();
        return z;
    }

    // index in [0, n)
    std::uint64_t next_index(std::uint64_t n) { return next_u64() % n; }

private:
    std::uint64_t state_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace mflt
