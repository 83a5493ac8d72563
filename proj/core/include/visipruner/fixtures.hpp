// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>

#include "visipruner/engine.hpp"

namespace visipruner::fixtures {

enum class FixtureKind : std::uint8_t {
    kEngineeredSink,    // one vision token absorbs the last row's attention at
                        // layer 1 while carrying a low-magnitude value vector
    kCriticalToken,     // one vision token moves the last token's attention
                        // output by l2 >= 1 at a single designated layer
    kVisionDeadAfter,   // vision influences the last token through layer L*,
                        // then every text-to-vision weight underflows to zero
    kUniform,           // identical vision embeddings, exact attention ties
};

FixtureKind fixture_kind_from_name(std::string_view name);  // InputError on unknown
const char* fixture_kind_name(FixtureKind kind);

struct FixtureOptions {
    std::size_t n_system = 2;
    std::size_t n_vision = 8;
    std::size_t n_instruction = 4;
    // Critical: the punch layer. Vision-dead: the last layer with influence.
    // 0 picks a default from the model depth.
    std::size_t designated_layer = 0;
};

// What the construction guarantees, with values measured on the dense run.
struct FixtureFacts {
    FixtureKind kind = FixtureKind::kUniform;
    std::size_t designated_position = 0;
    std::size_t designated_layer = 0;
    std::size_t expected_filtering_layer = 0;  // with the default probe start
    std::size_t expected_exit_layer = 0;       // with the default patience of 2
    double sink_last_row_mass = 0.0;           // summed over heads, layer 1
    double sink_value_l1 = 0.0;
    double median_vision_value_l1 = 0.0;
    double designated_l2 = 0.0;      // influence at the designated layer
    double designated_cosine = 1.0;
    bool vision_identical = false;
    bool argmax_flips_under_knockout = false;  // critical-token only
    std::size_t build_retries = 0;
};

struct Fixture {
    engine::Model model;
    engine::TokenStream stream;
    FixtureFacts facts;
};

// Builds the model and stream for the requested kind and verifies every
// guaranteed fact on a dense run before returning; content vectors are
// re-rolled (deterministically) until the checks pass. Engineered kinds run
// without positional encodings. Throws InputError for configurations the
// construction cannot honor.
Fixture build_fixture(FixtureKind kind, const engine::ModelConfig& config,
                      const FixtureOptions& options = {});
Fixture build_fixture(std::string_view kind_name, const engine::ModelConfig& config,
                      const FixtureOptions& options = {});

}  // namespace visipruner::fixtures
