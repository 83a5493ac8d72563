// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "visipruner/engine.hpp"

namespace visipruner::pruner {

enum class Selector : std::uint8_t { kValueAware, kAttnLast, kAttnText, kAttnVis };

const char* selector_name(Selector s);

struct PruneParams {
    std::size_t merge_layer = 1;
    std::size_t probe_start_layer = 2;
    double theta_cos = 0.995;  // filtering fires when min cosine drops below this
    double theta_l2 = 0.2;     // tokens below this L2 influence are discarded
    std::size_t exit_patience = 2;
    Selector selector = Selector::kValueAware;
    std::size_t baseline_top_k = 10;

    // Stage toggles; with all three off the runner reproduces the dense run
    // bit-exactly.
    bool merge_enabled = true;
    bool shallow_skip_enabled = true;
    bool detection_enabled = true;

    // Merge target is the (first vision position + offset); the mechanism is
    // insensitive to the choice, so the offset is exposed for experiments.
    std::size_t merge_target_offset = 0;

    void validate() const;
};

enum class LayerMode : std::uint8_t {
    kDense,       // plain dense layer (disabled stages, fallback)
    kMerge,       // dense with vision attention merged into one column
    kSkip,        // text attends text only; vision rows pass through to the FFN
    kDenseProbe,  // dense layer with the influence side channel attached
    kSparse,      // full interaction over text + retained vision only
    kVisionFree,  // vision dropped from the sequence entirely
};

const char* layer_mode_name(LayerMode m);

struct PruneSchedule {
    std::optional<std::size_t> filtering_layer;
    std::optional<std::size_t> exit_layer;
    std::vector<std::size_t> retained;  // vision positions, ascending
    std::vector<LayerMode> modes;       // one per layer, index = layer - 1
    std::vector<std::size_t> probed_layers;
    bool fallback_dense = false;           // filtering never fired; reran dense
    bool empty_retained_fallback = false;  // kept the argmax-l2 token
    PruneParams params;

    // Mode order must follow merge -> skip/probe -> sparse -> vision-free.
    void validate() const;
};

// Influence of masking one vision token on the last input token's attention
// output: cosine between original and masked outputs, L2 distance between
// them, and the attention mass the token held (summed over heads).
struct InfluenceRecord {
    std::size_t layer = 0;
    std::size_t token_position = 0;
    double cosine = 1.0;
    double l2 = 0.0;
    double attention_mass = 0.0;
};

struct LayerInfluences {
    std::size_t layer = 0;
    std::vector<InfluenceRecord> records;
};

// --- attention merging ---

// Merge one post-softmax weight row: the merge column takes the whole vision
// mass, every other vision entry becomes exactly 0, non-vision entries stay
// bit-identical. The merged entry is chosen so the left-to-right row sum is
// preserved bit-exactly. Throws InputError when merge_position is not a
// vision column of the row.
void merge_row(std::span<double> weights, std::span<const std::size_t> col_positions,
               std::span<const engine::Modality> col_modalities, std::size_t merge_position);

// Same, applied to every row of every head.
void merge_vision_attention(std::vector<kernels::RealMatrix>& weights_per_head,
                            std::span<const std::size_t> col_positions,
                            std::span<const engine::Modality> col_modalities,
                            std::size_t merge_position);

// --- influence measurement ---

// Zeroes the row->column weight in every head of the traced layer (without
// renormalizing), recomputes the row's attention output and compares with
// the original. Throws CausalityError when col_position > row_position.
InfluenceRecord influence_of_token(const engine::LayerTrace& trace, std::size_t row_position,
                                   std::size_t col_position);

// One record per vision column of the trace, measured at the last row.
std::vector<InfluenceRecord> layer_influences(const engine::LayerTrace& trace);

// Same, from a side-channel probe row.
std::vector<InfluenceRecord> probe_influences(const engine::ProbeRow& probe, std::size_t layer);

// Influence of every vision token on the last input token at one layer of
// the dense run. Runs layers below `layer` dense, then probes the last row;
// the probe itself is linear in sequence length. Enforces the runtime
// precondition layer >= params.probe_start_layer.
std::vector<InfluenceRecord> probe_layer_influences(const engine::Model& model,
                                                    const engine::TokenStream& stream,
                                                    std::size_t layer,
                                                    const PruneParams& params);

// Dense-run sweep over [first_layer, last_layer], one probe per layer.
std::vector<LayerInfluences> influence_sweep(const engine::Model& model,
                                             const engine::TokenStream& stream,
                                             std::size_t first_layer, std::size_t last_layer);

// --- detection and selection ---

// First layer whose minimum cosine drops below theta_cos; sweeps must be
// ordered by layer.
std::optional<std::size_t> detect_filtering_layer(const std::vector<LayerInfluences>& sweeps,
                                                  const PruneParams& params);

// Value-aware retained set: positions with l2 >= theta_l2. An empty result
// falls back to the argmax-l2 token (lowest position on ties) and reports it
// through used_fallback.
std::vector<std::size_t> select_retained(const std::vector<InfluenceRecord>& records,
                                         const PruneParams& params,
                                         bool* used_fallback = nullptr);

// Attention-based baselines: top-k vision columns by attention mass summed
// over heads from the last row / instruction rows / vision rows. Ties break
// toward the lower position.
std::vector<std::size_t> select_baseline(const engine::LayerTrace& trace, Selector strategy,
                                         std::size_t k);

// A layer has no measurable impact when every retained token keeps
// cosine >= theta_cos and l2 < theta_l2; the exit layer is the last layer of
// the first exit_patience-long run of such layers. History must be
// consecutive layers starting at the filtering layer.
std::optional<std::size_t> detect_exit_layer(const std::vector<LayerInfluences>& history,
                                             const PruneParams& params);

// --- schedule application ---

struct ScheduleRunOptions {
    bool capture_traces = false;
    kernels::MacCounter* counter = nullptr;
};

struct ScheduleRunResult {
    PruneSchedule schedule;
    std::vector<double> logits;
    engine::KvCache cache;
    std::vector<engine::LayerTrace> traces;      // ascending by layer when captured
    std::vector<LayerInfluences> probe_records;  // one entry per probed layer
    std::size_t final_sequence_length = 0;
};

// Runs the three-stage schedule end to end: merge at layer 1, shallow
// skipping with a probe side channel until the filtering layer fires,
// sparse interaction with the retained set until the exit layer, then
// vision-free layers. If filtering never fires the run restarts dense from
// probe_start_layer and the schedule is flagged. Vision keys/values are
// evicted from shallow-layer KV at the end.
ScheduleRunResult apply_schedule(const engine::Model& model, const engine::TokenStream& stream,
                                 const PruneParams& params, const ScheduleRunOptions& options = {});

// Removes vision-tagged positions from the cache in exactly the given layers
// (1-based). Throws InputError when a layer index is out of range.
engine::KvCache evict_vision_kv(engine::KvCache cache, const std::vector<std::size_t>& layers);

}  // namespace visipruner::pruner
