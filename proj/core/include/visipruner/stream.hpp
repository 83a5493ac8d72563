// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "visipruner/model.hpp"
#include "visipruner/rng.hpp"

namespace visipruner::engine {

enum class Modality : std::uint8_t { kSystem, kVision, kInstruction };

const char* modality_name(Modality m);

struct TokenEntry {
    std::size_t position = 0;
    Modality modality = Modality::kInstruction;
    bool has_embedding = false;           // vision carries synthetic d-vectors
    std::vector<double> embedding;        // used when has_embedding
    std::uint32_t token_id = 0;           // used otherwise
};

// Modality-tagged input sequence, ordered system -> vision -> instruction.
struct TokenStream {
    std::vector<TokenEntry> entries;

    std::size_t size() const { return entries.size(); }
    std::size_t count(Modality m) const;
    std::size_t n_system() const { return count(Modality::kSystem); }
    std::size_t n_vision() const { return count(Modality::kVision); }
    std::size_t n_instruction() const { return count(Modality::kInstruction); }
    std::size_t n_text() const { return n_system() + n_instruction(); }

    std::vector<std::size_t> positions_of(Modality m) const;

    // Throws InputError on empty stream, out-of-order segments, or positions
    // that are not 0,1,2,...
    void validate() const;
};

// Random stream: text segments as token ids, vision as synthetic embeddings.
TokenStream random_stream(const ModelConfig& config, std::size_t n_system, std::size_t n_vision,
                          std::size_t n_instruction, Rng& rng);

}  // namespace visipruner::engine
