// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace visipruner {

// splitmix64 stream. Every piece of randomness in the project flows from one
// of these, seeded explicitly; there is no ambient entropy anywhere, so a
// (seed, call sequence) pair fully determines a run on any platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [-1, 1).
    double next_symmetric() { return 2.0 * next_unit() - 1.0; }

    // Uniform integer in [0, bound). Modulo bias is irrelevant for test-scale bounds.
    std::uint64_t next_below(std::uint64_t bound) { return bound == 0 ? 0 : next_u64() % bound; }

    // Derive an independent stream for a named sub-component.
    Rng fork(std::uint64_t salt) { return Rng(next_u64() ^ (salt * 0x9E3779B97F4A7C15ull)); }

private:
    std::uint64_t state_;
};

}  // namespace visipruner
