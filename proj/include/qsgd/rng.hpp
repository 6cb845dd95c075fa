/*
 * Copyright 2026 The qsgd-sim Authors.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace qsgd {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept
{
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Seed of the substream `tag` below `parent`. Distinct tags give
/// statistically independent streams; the map is a pure function.
constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t tag) noexcept
{
    return mix64(mix64(parent) ^ mix64(tag ^ 0x632BE59BD9B4E019ULL));
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept
{
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Random stream used by every stochastic component.
///
/// Satisfies the small interface the templated algorithms rely on:
/// `normal()`, `uniform()` in [0, 1) and `sign()` in {-1, +1}.
/// Tests substitute their own types with the same three members.
class Stream {
public:
    explicit Stream(std::uint64_t seed = 0) : engine_(seed) {}

    double normal() { return normal_(engine_); }

    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double sign() { return (engine_() >> 63) != 0 ? 1.0 : -1.0; }

    std::mt19937_64 &engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_;
};

} // namespace qsgd
