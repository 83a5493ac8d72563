// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "visipruner/kernels.hpp"

namespace visipruner::engine {

enum class PositionalEncoding : std::uint8_t {
    kSinusoidal,
    kNone,  // fixtures that need bit-exact attention ties turn encodings off
};

struct ModelConfig {
    std::size_t num_layers = 4;   // L
    std::size_t hidden_dim = 32;  // d
    std::size_t num_heads = 4;    // H
    std::size_t ffn_dim = 64;     // m
    std::size_t vocab_size = 97;
    std::uint64_t seed = 1;
    PositionalEncoding positional = PositionalEncoding::kSinusoidal;

    std::size_t head_dim() const { return hidden_dim / num_heads; }

    // Throws InputError unless all counts are >= 1 and hidden_dim % num_heads == 0.
    void validate() const;
};

struct LayerWeights {
    kernels::RealMatrix w_q;     // d x d
    kernels::RealMatrix w_k;     // d x d
    kernels::RealMatrix w_v;     // d x d
    kernels::RealMatrix w_o;     // d x d
    kernels::RealMatrix w_gate;  // d x m
    kernels::RealMatrix w_up;    // d x m
    kernels::RealMatrix w_down;  // m x d
    std::vector<double> attn_norm_scale;  // d, init 1
    std::vector<double> ffn_norm_scale;   // d, init 1
};

// Immutable after init; safe for shared concurrent reads.
struct Model {
    ModelConfig config;
    std::vector<LayerWeights> layers;
    kernels::RealMatrix embedding;    // vocab x d
    kernels::RealMatrix unembedding;  // vocab x d (W_u)

    void validate() const;
};

// Deterministic init: weights uniform symmetric scaled 1/sqrt(d), norm scales 1.
// Identical (config, seed) gives a bit-identical model.
Model init_model(const ModelConfig& config);

// Sinusoidal encoding for one position (all zeros when encodings are off).
std::vector<double> positional_encoding(const ModelConfig& config, std::size_t position);

}  // namespace visipruner::engine
