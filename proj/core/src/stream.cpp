// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include "visipruner/stream.hpp"

#include <cmath>
#include <string>

#include "visipruner/errors.hpp"

namespace visipruner::engine {

const char* modality_name(Modality m) {
    switch (m) {
        case Modality::kSystem: return "system";
        case Modality::kVision: return "vision";
        case Modality::kInstruction: return "instruction";
    }
    return "unknown";
}

std::size_t TokenStream::count(Modality m) const {
    std::size_t n = 0;
    for (const auto& e : entries) {
        if (e.modality == m) {
            ++n;
        }
    }
    return n;
}

std::vector<std::size_t> TokenStream::positions_of(Modality m) const {
    std::vector<std::size_t> out;
    for (const auto& e : entries) {
        if (e.modality == m) {
            out.push_back(e.position);
        }
    }
    return out;
}

void TokenStream::validate() const {
    if (entries.empty()) {
        throw InputError("TokenStream: empty stream");
    }
    int stage = 0;  // 0 system, 1 vision, 2 instruction
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].position != i) {
            throw InputError("TokenStream: positions must be 0,1,2,... (entry " +
                             std::to_string(i) + ")");
        }
        const int want = entries[i].modality == Modality::kSystem        ? 0
                         : entries[i].modality == Modality::kVision      ? 1
                                                                         : 2;
        if (want < stage) {
            throw InputError("TokenStream: segments must be ordered system -> vision -> "
                             "instruction");
        }
        stage = want;
    }
}

TokenStream random_stream(const ModelConfig& config, std::size_t n_system, std::size_t n_vision,
                          std::size_t n_instruction, Rng& rng) {
    TokenStream stream;
    std::size_t pos = 0;
    const double scale = std::sqrt(3.0);
    auto push_text = [&](std::size_t n, Modality mod) {
        for (std::size_t i = 0; i < n; ++i) {
            TokenEntry e;
            e.position = pos++;
            e.modality = mod;
            e.token_id = static_cast<std::uint32_t>(rng.next_below(config.vocab_size));
            stream.entries.push_back(std::move(e));
        }
    };
    push_text(n_system, Modality::kSystem);
    for (std::size_t i = 0; i < n_vision; ++i) {
        TokenEntry e;
        e.position = pos++;
        e.modality = Modality::kVision;
        e.has_embedding = true;
        e.embedding.resize(config.hidden_dim);
        for (double& v : e.embedding) {
            v = rng.next_symmetric() * scale;
        }
        stream.entries.push_back(std::move(e));
    }
    push_text(n_instruction, Modality::kInstruction);
    stream.validate();
    return stream;
}

}  // namespace visipruner::engine
