#pragma once

#include <cstdint>
#include <vector>

namespace mlsp {

// SplitMix64. Small, fast, and bit-stable across platforms, which is what the
// determinism contract needs; std::uniform_real_distribution is
// implementation-defined and therefore unusable here.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Counter-free keyed hash: a deterministic function of (seed, tag, a, b).
// Used wherever a draw must be reproducible without replaying a stream,
// e.g. the per-(image, epoch) augmentation pick.
inline uint64_t keyed_u64(uint64_t seed, uint64_t tag, uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = splitmix64(seed ^ (tag * 0xd1b54a32d192ed03ULL));
    h = splitmix64(h ^ (a * 0x8cb92ba72f3d8dd7ULL));
    h = splitmix64(h ^ (b * 0xaef17502108ef2d9ULL));
    return h;
}

// Sequential generator over the same hash.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double next_range(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Uniform integer in [0, n). n must be > 0. Multiply-shift bound; the bias
    // for n << 2^64 is far below anything observable here.
    uint64_t next_below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Approximate standard normal (sum of uniforms is plenty for label noise
    // and init jitter; no tails beyond +-6).
    double next_normal() {
        double s = 0.0;
        for (int i = 0; i < 12; ++i) s += next_unit();
        return s - 6.0;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

// Named sub-streams so independent consumers of one run seed never collide.
namespace rng_tag {
constexpr uint64_t kInit = 0x01;        // parameter initialization
constexpr uint64_t kDropout = 0x02;     // dropout masks
constexpr uint64_t kShuffle = 0x03;     // per-epoch batch order
constexpr uint64_t kAugment = 0x04;     // per-(image, epoch) augmentation draw
constexpr uint64_t kSplit = 0x05;       // train/val split
constexpr uint64_t kSynth = 0x06;       // synthetic backbone projections
constexpr uint64_t kCorpus = 0x07;      // synthetic corpus images and labels
}  // namespace rng_tag

}  // namespace mlsp
