#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace sdseg {

/// splitmix64 finalizer; used to derive stream keys from (seed, path...) tuples.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Deterministic xoshiro256** stream. All randomness in the project flows
/// through this type so results are bit-identical across platforms and
/// independent of the standard library's distribution implementations.
///
/// Streams are keyed, not shared: derive one per (seed, purpose, index...)
/// so evaluation order and parallel scheduling never change the draws.
class StreamRng {
public:
    explicit StreamRng(std::uint64_t key) {
        // seed the four lanes by iterating splitmix64
        std::uint64_t x = key;
        for (auto& lane : s_) {
            x = mix64(x);
            lane = x ? x : 0x6a09e667f3bcc909ULL;
        }
    }

    /// Derive a stream from a seed plus a key path, e.g.
    /// StreamRng::from_path(seed, {kNoise, obs_index}).
    static StreamRng from_path(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
        std::uint64_t k = mix64(seed);
        for (std::uint64_t p : path) k = mix64(k ^ mix64(p));
        return StreamRng(k);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (no cached second value, so the draw
    /// count per call is fixed).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // multiply-shift; bias is negligible for the n used here (< 2^32)
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::uint64_t s_[4];
};

/// Well-known stream purposes; keeps key paths collision-free and greppable.
namespace stream {
inline constexpr std::uint64_t kParamInit = 1;
inline constexpr std::uint64_t kTrainShuffle = 2;
inline constexpr std::uint64_t kTrainDropout = 3;
inline constexpr std::uint64_t kValDropout = 4;
inline constexpr std::uint64_t kMcSample = 5;
inline constexpr std::uint64_t kMaskPattern = 6;
inline constexpr std::uint64_t kFeatureNoise = 7;
inline constexpr std::uint64_t kStochasticScale = 8;
inline constexpr std::uint64_t kSignature = 9;
inline constexpr std::uint64_t kSplitShuffle = 10;
}  // namespace stream

}  // namespace sdseg
