/*
   Copyright 2026 the sonoseg authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/
#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace sonoseg {

// Counter-based randomness: every draw is a pure function of
// (seed, stream, a, b). No generator state exists, so loops may run in any
// order or in parallel and still produce identical values.

/// Stream tags keep independent consumers of the same seed decorrelated.
enum class RngStream : std::uint32_t {
    scatter_presence = 1,
    scatter_amplitude = 2,
    frame_noise = 3,
    augment = 4,
    patch = 5,
    net_init = 6,
    split_shuffle = 7,
    train_pick = 8,
    test_data = 1000,  // reserved for test fixtures
};

namespace detail {

inline void philox_round(std::array<std::uint32_t, 4>& ctr, std::array<std::uint32_t, 2>& key) {
    constexpr std::uint32_t mult_a = 0xD2511F53u, mult_b = 0xCD9E8D57u;
    const std::uint64_t p0 = static_cast<std::uint64_t>(mult_a) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(mult_b) * ctr[2];
    ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0],
           static_cast<std::uint32_t>(p1),
           static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1],
           static_cast<std::uint32_t>(p0)};
    key[0] += 0x9E3779B9u;
    key[1] += 0xBB67AE85u;
}

}  // namespace detail

/// Philox 4x32, 10 rounds (Salmon et al., SC'11).
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                               std::array<std::uint32_t, 2> key) {
    for (int round = 0; round < 10; ++round) detail::philox_round(counter, key);
    return counter;
}

/// 128 random bits for the tuple (seed, stream, a, b).
/// Counter layout: (stream, a_lo, a_hi, b); key carries the seed.
inline std::array<std::uint32_t, 4> rng_block(std::uint64_t seed, RngStream stream,
                                              std::uint64_t a, std::uint32_t b = 0) {
    return philox4x32({static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(a),
                       static_cast<std::uint32_t>(a >> 32), b},
                      {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)});
}

inline std::uint64_t rng_u64(std::uint64_t seed, RngStream stream, std::uint64_t a,
                             std::uint32_t b = 0) {
    const auto r = rng_block(seed, stream, a, b);
    return (static_cast<std::uint64_t>(r[0]) << 32) | r[1];
}

namespace detail {

/// 53-bit mantissa from two words, mapped to [0, 1).
inline double to_unit(std::uint32_t hi, std::uint32_t lo) {
    const std::uint64_t bits = ((static_cast<std::uint64_t>(hi) << 32) | lo) >> 11;
    return static_cast<double>(bits) * 0x1.0p-53;
}

}  // namespace detail

/// Uniform draw in [0, 1).
inline double rng_uniform01(std::uint64_t seed, RngStream stream, std::uint64_t a,
                            std::uint32_t b = 0) {
    const auto r = rng_block(seed, stream, a, b);
    return detail::to_unit(r[0], r[1]);
}

/// Uniform draw in [lo, hi).
inline double rng_uniform(std::uint64_t seed, RngStream stream, std::uint64_t a, std::uint32_t b,
                          double lo, double hi) {
    return lo + (hi - lo) * rng_uniform01(seed, stream, a, b);
}

/// Standard normal via Box-Muller on the two halves of one Philox block.
inline double rng_normal(std::uint64_t seed, RngStream stream, std::uint64_t a,
                         std::uint32_t b = 0) {
    const auto r = rng_block(seed, stream, a, b);
    // u1 in (0, 1] so the log stays finite.
    const double u1 = 1.0 - detail::to_unit(r[0], r[1]);
    const double u2 = detail::to_unit(r[2], r[3]);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

/// Uniform integer in [0, n). n must be positive; uses 64-bit rejection-free
/// multiply-shift which is unbiased enough for n far below 2^32.
inline std::uint64_t rng_below(std::uint64_t seed, RngStream stream, std::uint64_t a,
                               std::uint32_t b, std::uint64_t n) {
    const auto r = rng_block(seed, stream, a, b);
    const std::uint64_t x = (static_cast<std::uint64_t>(r[0]) << 32) | r[1];
    // map via 128-bit multiply to avoid modulo bias
    const unsigned __int128 wide = static_cast<unsigned __int128>(x) * n;
    return static_cast<std::uint64_t>(wide >> 64);
}

}  // namespace sonoseg
