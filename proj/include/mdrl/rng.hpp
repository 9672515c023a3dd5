#pragma once

#include <cstdint>
#include <random>

namespace mdrl {

/// splitmix64 mixing step; used to derive independent stream seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
    return splitmix64(splitmix64(seed ^ (0xD1B54A32D192ED03ULL * stream)) + index);
}

using Rng = std::mt19937_64;

}  // namespace mdrl
