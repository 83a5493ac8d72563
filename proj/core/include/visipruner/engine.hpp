// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "visipruner/kernels.hpp"
#include "visipruner/model.hpp"
#include "visipruner/stream.hpp"
#include "visipruner/trace.hpp"

namespace visipruner::engine {

struct KvEntry {
    std::size_t position = 0;
    Modality modality = Modality::kInstruction;
};

struct KvLayer {
    std::vector<KvEntry> entries;
    // [head][row][head_dim], rows aligned with entries
    std::vector<std::vector<std::vector<double>>> keys;
    std::vector<std::vector<std::vector<double>>> values;

    std::size_t length() const { return entries.size(); }
};

// Per-layer key/value rows for surviving positions. Keys and values stay the
// same length per layer; evicted positions are absent from both.
struct KvCache {
    std::vector<KvLayer> layers;
    std::size_t next_position = 0;  // decode must continue exactly here

    std::size_t num_layers() const { return layers.size(); }
    void validate() const;
};

// Hook points the pruning runtime and the analysis probes build on. Both
// default-constructed (identity) hooks and absent hooks reproduce the dense
// run bit-exactly: masking always goes through the same softmax path.
struct AttentionHooks {
    // Extra pre-softmax mask on top of causality; return false to deny.
    std::function<bool(std::size_t layer, std::size_t row_pos, Modality row_mod,
                       std::size_t col_pos, Modality col_mod)>
        allow;

    // Post-softmax adjustment of one head-row (attention merging).
    std::function<void(std::size_t layer, std::size_t head, std::size_t row_pos,
                       Modality row_mod, std::span<double> weights,
                       std::span<const std::size_t> col_positions,
                       std::span<const Modality> col_modalities)>
        reweight;
};

struct PrefillOptions {
    AttentionHooks hooks;
    bool capture_traces = false;
    // Probes can mask a row completely; with this flag the row's attention
    // output is zero instead of raising DegenerateRowError.
    bool zero_output_on_degenerate = false;
    kernels::MacCounter* counter = nullptr;
};

struct PrefillResult {
    std::vector<LayerTrace> traces;  // empty unless capture_traces
    std::vector<double> logits;      // vocab, last position
    KvCache cache;
    std::size_t degenerate_rows = 0;
};

// Single forward pass over the whole sequence with causal self-attention,
// pre-norm residual blocks and a gated FFN. Logits are W_u * H_last.
PrefillResult prefill(const Model& model, const TokenStream& stream,
                      const PrefillOptions& options = {});

struct DecodeInput {
    bool has_embedding = false;
    std::vector<double> embedding;
    std::uint32_t token_id = 0;
    Modality modality = Modality::kInstruction;
};

// One autoregressive step: the new token attends to every cached position
// plus itself, and the cache grows by one row per layer. `position` must be
// cache.next_position (StateError otherwise, which catches stale-cache reuse);
// the cache layer count must match the model.
std::vector<double> decode_step(const Model& model, KvCache& cache, const DecodeInput& input,
                                std::size_t position, kernels::MacCounter* counter = nullptr);

// --- building blocks shared with the pruning runtime ---

// Embeddings (+ positional encodings) for the stream; row i = position i.
kernels::RealMatrix embed_stream(const Model& model, const TokenStream& stream);

struct LayerForwardSpec {
    std::size_t layer = 0;                 // 1-based
    std::vector<std::size_t> attend_rows;  // indices into the current sequence
    std::vector<std::size_t> key_cols;     // indices into the current sequence
    const AttentionHooks* hooks = nullptr;
    bool zero_output_on_degenerate = false;
    bool capture_trace = false;
    kernels::MacCounter* counter = nullptr;
    KvCache* cache = nullptr;  // appends key/value rows for key_cols when set
    std::size_t* degenerate_rows = nullptr;
};

// One transformer layer over the current sequence; hidden is updated in
// place. Rows outside attend_rows pass attention through untouched; the FFN
// applies to every row.
std::optional<LayerTrace> layer_forward(const Model& model, kernels::RealMatrix& hidden,
                                        const std::vector<std::size_t>& positions,
                                        const std::vector<Modality>& modalities,
                                        const LayerForwardSpec& spec);

// Side-channel attention row for the last sequence position over the given
// columns, never entering the residual stream. Feeds the influence probes.
struct ProbeRow {
    std::vector<std::vector<double>> weights;   // [head][col]
    std::vector<kernels::RealMatrix> values;    // [head], cols x head_dim
    std::vector<double> attn_output;            // d, concatenated heads
    std::vector<std::size_t> col_positions;
    std::vector<Modality> col_modalities;
};

ProbeRow probe_last_row(const Model& model, const kernels::RealMatrix& hidden,
                        const std::vector<std::size_t>& positions,
                        const std::vector<Modality>& modalities, std::size_t layer,
                        kernels::MacCounter* counter = nullptr);

// logits = W_u * h for one hidden row.
std::vector<double> unembed(const Model& model, std::span<const double> hidden,
                            kernels::MacCounter* counter = nullptr);

}  // namespace visipruner::engine
