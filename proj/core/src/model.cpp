// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include "visipruner/model.hpp"

#include <cmath>
#include <string>

#include "visipruner/errors.hpp"
#include "visipruner/rng.hpp"

namespace visipruner::engine {

void ModelConfig::validate() const {
    if (num_layers < 1 || hidden_dim < 1 || num_heads < 1 || ffn_dim < 1 || vocab_size < 1) {
        throw InputError("ModelConfig: every count must be >= 1");
    }
    if (hidden_dim % num_heads != 0) {
        throw InputError("ModelConfig: hidden_dim " + std::to_string(hidden_dim) +
                         " not divisible by num_heads " + std::to_string(num_heads));
    }
}

void Model::validate() const {
    config.validate();
    if (layers.size() != config.num_layers) {
        throw InvariantViolation("Model: layer count does not match config");
    }
    const std::size_t d = config.hidden_dim;
    const std::size_t m = config.ffn_dim;
    for (const auto& lw : layers) {
        if (lw.w_q.rows != d || lw.w_q.cols != d || lw.w_k.rows != d || lw.w_k.cols != d ||
            lw.w_v.rows != d || lw.w_v.cols != d || lw.w_o.rows != d || lw.w_o.cols != d ||
            lw.w_gate.rows != d || lw.w_gate.cols != m || lw.w_up.rows != d ||
            lw.w_up.cols != m || lw.w_down.rows != m || lw.w_down.cols != d ||
            lw.attn_norm_scale.size() != d || lw.ffn_norm_scale.size() != d) {
            throw InvariantViolation("Model: weight shapes inconsistent with config");
        }
        lw.w_q.require_finite("w_q");
        lw.w_k.require_finite("w_k");
        lw.w_v.require_finite("w_v");
        lw.w_o.require_finite("w_o");
        lw.w_gate.require_finite("w_gate");
        lw.w_up.require_finite("w_up");
        lw.w_down.require_finite("w_down");
    }
    if (embedding.rows != config.vocab_size || embedding.cols != d ||
        unembedding.rows != config.vocab_size || unembedding.cols != d) {
        throw InvariantViolation("Model: embedding/unembedding shape mismatch");
    }
    embedding.require_finite("embedding");
    unembedding.require_finite("unembedding");
}

namespace {

// Uniform symmetric entries with standard deviation `sd`.
void fill_uniform(kernels::RealMatrix& m, Rng& rng, double sd) {
    const double scale = sd * std::sqrt(3.0);
    for (double& v : m.data) {
        v = rng.next_symmetric() * scale;
    }
}

}  // namespace

Model init_model(const ModelConfig& config) {
    config.validate();
    Model model;
    model.config = config;
    Rng rng(config.seed);

    const std::size_t d = config.hidden_dim;
    const double weight_sd = 1.0 / std::sqrt(static_cast<double>(d));

    model.layers.resize(config.num_layers);
    for (auto& lw : model.layers) {
        lw.w_q = kernels::RealMatrix(d, d);
        lw.w_k = kernels::RealMatrix(d, d);
        lw.w_v = kernels::RealMatrix(d, d);
        lw.w_o = kernels::RealMatrix(d, d);
        lw.w_gate = kernels::RealMatrix(d, config.ffn_dim);
        lw.w_up = kernels::RealMatrix(d, config.ffn_dim);
        lw.w_down = kernels::RealMatrix(config.ffn_dim, d);
        fill_uniform(lw.w_q, rng, weight_sd);
        fill_uniform(lw.w_k, rng, weight_sd);
        fill_uniform(lw.w_v, rng, weight_sd);
        fill_uniform(lw.w_o, rng, weight_sd);
        fill_uniform(lw.w_gate, rng, weight_sd);
        fill_uniform(lw.w_up, rng, weight_sd);
        fill_uniform(lw.w_down, rng, 1.0 / std::sqrt(static_cast<double>(config.ffn_dim)));
        lw.attn_norm_scale.assign(d, 1.0);
        lw.ffn_norm_scale.assign(d, 1.0);
    }
    model.embedding = kernels::RealMatrix(config.vocab_size, d);
    model.unembedding = kernels::RealMatrix(config.vocab_size, d);
    fill_uniform(model.embedding, rng, 1.0);
    fill_uniform(model.unembedding, rng, weight_sd);
    return model;
}

std::vector<double> positional_encoding(const ModelConfig& config, std::size_t position) {
    std::vector<double> pe(config.hidden_dim, 0.0);
    if (config.positional == PositionalEncoding::kNone) {
        return pe;
    }
    const double d = static_cast<double>(config.hidden_dim);
    for (std::size_t i = 0; i + 1 < config.hidden_dim; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
        pe[i] = std::sin(static_cast<double>(position) * freq);
        pe[i + 1] = std::cos(static_cast<double>(position) * freq);
    }
    return pe;
}

}  // namespace visipruner::engine
