// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include "visipruner/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "visipruner/errors.hpp"

namespace visipruner::pruner {

using engine::LayerTrace;
using engine::Modality;
using kernels::RealMatrix;

const char* selector_name(Selector s) {
    switch (s) {
        case Selector::kValueAware: return "value-aware";
        case Selector::kAttnLast: return "attn-last";
        case Selector::kAttnText: return "attn-text";
        case Selector::kAttnVis: return "attn-vis";
    }
    return "unknown";
}

const char* layer_mode_name(LayerMode m) {
    switch (m) {
        case LayerMode::kDense: return "dense";
        case LayerMode::kMerge: return "merge";
        case LayerMode::kSkip: return "skip";
        case LayerMode::kDenseProbe: return "dense-probe";
        case LayerMode::kSparse: return "sparse";
        case LayerMode::kVisionFree: return "vision-free";
    }
    return "unknown";
}

void PruneParams::validate() const {
    if (!(theta_cos > 0.0 && theta_cos <= 1.0)) {
        throw InputError("PruneParams: theta_cos must be in (0, 1]");
    }
    if (theta_l2 < 0.0) {
        throw InputError("PruneParams: theta_l2 must be >= 0");
    }
    if (exit_patience < 1) {
        throw InputError("PruneParams: exit_patience must be >= 1");
    }
    if (merge_layer < 1) {
        throw InputError("PruneParams: merge_layer must be >= 1");
    }
    if (merge_layer >= probe_start_layer) {
        throw InputError("PruneParams: merge_layer must be below probe_start_layer");
    }
}

void PruneSchedule::validate() const {
    auto rank = [](LayerMode m) {
        switch (m) {
            case LayerMode::kMerge:
            case LayerMode::kDense:
            case LayerMode::kSkip:
            case LayerMode::kDenseProbe: return 0;
            case LayerMode::kSparse: return 1;
            case LayerMode::kVisionFree: return 2;
        }
        return 0;
    };
    int prev = 0;
    for (std::size_t i = 0; i < modes.size(); ++i) {
        if (modes[i] == LayerMode::kMerge && i != 0) {
            throw InvariantViolation("PruneSchedule: merge is only valid at layer 1");
        }
        const int r = rank(modes[i]);
        if (r < prev) {
            throw InvariantViolation("PruneSchedule: layer modes must not move backwards");
        }
        prev = r;
    }
    if (filtering_layer.has_value() && exit_layer.has_value() &&
        *exit_layer < *filtering_layer) {
        throw InvariantViolation("PruneSchedule: exit layer before filtering layer");
    }
}

void merge_row(std::span<double> weights, std::span<const std::size_t> col_positions,
               std::span<const Modality> col_modalities, std::size_t merge_position) {
    if (weights.size() != col_positions.size() || weights.size() != col_modalities.size()) {
        throw ShapeError("merge_row: weight/column arrays differ in length");
    }
    std::size_t merge_index = weights.size();
    for (std::size_t j = 0; j < weights.size(); ++j) {
        if (col_modalities[j] == Modality::kVision && col_positions[j] == merge_position) {
            merge_index = j;
        }
    }
    if (merge_index == weights.size()) {
        throw InputError("merge_row: merge position " + std::to_string(merge_position) +
                         " is not a vision column of this row");
    }

    // The merged entry is the running left-to-right sum of the vision block,
    // so any total that keeps the block contiguous is preserved bit-exactly.
    // (No single double can preserve an arbitrary-order float sum: with
    // round-to-nearest-even some targets are unreachable from a given prefix.)
    double merged = 0.0;
    for (std::size_t j = 0; j < weights.size(); ++j) {
        if (col_modalities[j] == Modality::kVision) {
            merged += weights[j];
            weights[j] = 0.0;
        }
    }
    weights[merge_index] = merged;
}

void merge_vision_attention(std::vector<RealMatrix>& weights_per_head,
                            std::span<const std::size_t> col_positions,
                            std::span<const Modality> col_modalities,
                            std::size_t merge_position) {
    for (auto& w : weights_per_head) {
        for (std::size_t i = 0; i < w.rows; ++i) {
            merge_row(w.row(i), col_positions, col_modalities, merge_position);
        }
    }
}

namespace {

InfluenceRecord influence_from_row(std::size_t layer, std::size_t token_position,
                                   std::span<const double> original,
                                   const std::vector<double>& head_weights_at_j,
                                   const std::vector<std::span<const double>>& values_at_j,
                                   std::size_t head_dim) {
    std::vector<double> masked(original.begin(), original.end());
    double mass = 0.0;
    for (std::size_t h = 0; h < head_weights_at_j.size(); ++h) {
        const double w = head_weights_at_j[h];
        mass += w;
        for (std::size_t t = 0; t < head_dim; ++t) {
            masked[h * head_dim + t] -= w * values_at_j[h][t];
        }
    }
    const auto cl = kernels::cosine_and_l2(original, masked);
    InfluenceRecord rec;
    rec.layer = layer;
    rec.token_position = token_position;
    rec.cosine = cl.cosine;
    rec.l2 = cl.l2;
    rec.attention_mass = mass;
    return rec;
}

}  // namespace

InfluenceRecord influence_of_token(const LayerTrace& trace, std::size_t row_position,
                                   std::size_t col_position) {
    if (col_position > row_position) {
        throw CausalityError("influence_of_token: column position " +
                             std::to_string(col_position) + " is after row position " +
                             std::to_string(row_position));
    }
    const std::size_t i = trace.row_index(row_position);
    const std::size_t j = trace.col_index(col_position);
    const std::size_t num_heads = trace.num_heads();
    const std::size_t head_dim = trace.values.empty() ? 0 : trace.values[0].cols;

    std::vector<double> head_weights(num_heads);
    std::vector<std::span<const double>> values_at_j(num_heads);
    for (std::size_t h = 0; h < num_heads; ++h) {
        head_weights[h] = trace.weights[h].at(i, j);
        values_at_j[h] = trace.values[h].row(j);
    }
    return influence_from_row(trace.layer, col_position, trace.attn_output.row(i), head_weights,
                              values_at_j, head_dim);
}

std::vector<InfluenceRecord> layer_influences(const LayerTrace& trace) {
    std::vector<InfluenceRecord> records;
    if (trace.row_positions.empty()) {
        return records;
    }
    const std::size_t last_pos = trace.row_positions.back();
    for (std::size_t j = 0; j < trace.col_positions.size(); ++j) {
        if (trace.col_modalities[j] == Modality::kVision) {
            records.push_back(influence_of_token(trace, last_pos, trace.col_positions[j]));
        }
    }
    return records;
}

std::vector<InfluenceRecord> probe_influences(const engine::ProbeRow& probe, std::size_t layer) {
    std::vector<InfluenceRecord> records;
    const std::size_t num_heads = probe.weights.size();
    const std::size_t head_dim = probe.values.empty() ? 0 : probe.values[0].cols;
    for (std::size_t j = 0; j < probe.col_positions.size(); ++j) {
        if (probe.col_modalities[j] != Modality::kVision) {
            continue;
        }
        std::vector<double> head_weights(num_heads);
        std::vector<std::span<const double>> values_at_j(num_heads);
        for (std::size_t h = 0; h < num_heads; ++h) {
            head_weights[h] = probe.weights[h][j];
            values_at_j[h] = probe.values[h].row(j);
        }
        records.push_back(influence_from_row(layer, probe.col_positions[j], probe.attn_output,
                                             head_weights, values_at_j, head_dim));
    }
    return records;
}

namespace {

struct Sequence {
    RealMatrix hidden;
    std::vector<std::size_t> positions;
    std::vector<Modality> modalities;

    std::size_t size() const { return positions.size(); }

    std::vector<std::size_t> all_indices() const {
        std::vector<std::size_t> idx(size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = i;
        }
        return idx;
    }

    std::vector<std::size_t> text_indices() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < size(); ++i) {
            if (modalities[i] != Modality::kVision) {
                idx.push_back(i);
            }
        }
        return idx;
    }

    void keep_rows(const std::vector<std::size_t>& rows) {
        RealMatrix next(rows.size(), hidden.cols);
        std::vector<std::size_t> pos(rows.size());
        std::vector<Modality> mods(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t j = 0; j < hidden.cols; ++j) {
                next.at(i, j) = hidden.at(rows[i], j);
            }
            pos[i] = positions[rows[i]];
            mods[i] = modalities[rows[i]];
        }
        hidden = std::move(next);
        positions = std::move(pos);
        modalities = std::move(mods);
    }

    // Drops vision rows not in `retained` (ascending positions).
    void drop_vision_except(const std::vector<std::size_t>& retained) {
        std::vector<std::size_t> keep;
        for (std::size_t i = 0; i < size(); ++i) {
            if (modalities[i] != Modality::kVision ||
                std::binary_search(retained.begin(), retained.end(), positions[i])) {
                keep.push_back(i);
            }
        }
        keep_rows(keep);
    }
};

Sequence make_sequence(const engine::Model& model, const engine::TokenStream& stream) {
    Sequence seq;
    seq.hidden = engine::embed_stream(model, stream);
    seq.positions.resize(stream.size());
    seq.modalities.resize(stream.size());
    for (std::size_t i = 0; i < stream.size(); ++i) {
        seq.positions[i] = stream.entries[i].position;
        seq.modalities[i] = stream.entries[i].modality;
    }
    return seq;
}

engine::KvCache make_cache(const engine::Model& model) {
    engine::KvCache cache;
    cache.layers.resize(model.config.num_layers);
    for (auto& layer : cache.layers) {
        layer.keys.resize(model.config.num_heads);
        layer.values.resize(model.config.num_heads);
    }
    return cache;
}

void clear_cache_layer(engine::KvCache& cache, std::size_t layer) {
    auto& l = cache.layers[layer - 1];
    l.entries.clear();
    for (auto& k : l.keys) {
        k.clear();
    }
    for (auto& v : l.values) {
        v.clear();
    }
}

bool record_has_impact(const InfluenceRecord& r, const PruneParams& p) {
    return !(r.cosine >= p.theta_cos && r.l2 < p.theta_l2);
}

}  // namespace

std::vector<InfluenceRecord> probe_layer_influences(const engine::Model& model,
                                                    const engine::TokenStream& stream,
                                                    std::size_t layer,
                                                    const PruneParams& params) {
    params.validate();
    if (layer < params.probe_start_layer) {
        throw InputError("probe_layer_influences: layer below probe_start_layer");
    }
    if (layer > model.config.num_layers) {
        throw InputError("probe_layer_influences: layer out of range");
    }
    Sequence seq = make_sequence(model, stream);
    const auto all = seq.all_indices();
    for (std::size_t l = 1; l < layer; ++l) {
        engine::LayerForwardSpec spec;
        spec.layer = l;
        spec.attend_rows = all;
        spec.key_cols = all;
        engine::layer_forward(model, seq.hidden, seq.positions, seq.modalities, spec);
    }
    const auto probe =
        engine::probe_last_row(model, seq.hidden, seq.positions, seq.modalities, layer);
    return probe_influences(probe, layer);
}

std::vector<LayerInfluences> influence_sweep(const engine::Model& model,
                                             const engine::TokenStream& stream,
                                             std::size_t first_layer, std::size_t last_layer) {
    if (first_layer < 1 || last_layer > model.config.num_layers || first_layer > last_layer) {
        throw InputError("influence_sweep: bad layer range");
    }
    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto run = engine::prefill(model, stream, options);
    std::vector<LayerInfluences> sweeps;
    for (std::size_t l = first_layer; l <= last_layer; ++l) {
        sweeps.push_back({l, layer_influences(run.traces[l - 1])});
    }
    return sweeps;
}

std::optional<std::size_t> detect_filtering_layer(const std::vector<LayerInfluences>& sweeps,
                                                  const PruneParams& params) {
    for (std::size_t i = 0; i < sweeps.size(); ++i) {
        if (i > 0 && sweeps[i].layer <= sweeps[i - 1].layer) {
            throw InputError("detect_filtering_layer: sweeps must be ordered by layer");
        }
        for (const auto& r : sweeps[i].records) {
            if (r.cosine < params.theta_cos) {
                return sweeps[i].layer;
            }
        }
    }
    return std::nullopt;
}

std::vector<std::size_t> select_retained(const std::vector<InfluenceRecord>& records,
                                         const PruneParams& params, bool* used_fallback) {
    if (records.empty()) {
        throw InputError("select_retained: no influence records");
    }
    if (used_fallback != nullptr) {
        *used_fallback = false;
    }
    std::vector<std::size_t> retained;
    for (const auto& r : records) {
        if (r.l2 >= params.theta_l2) {
            retained.push_back(r.token_position);
        }
    }
    if (retained.empty()) {
        // Keep the strongest token so the sparse phase stays well defined.
        std::size_t best = 0;
        for (std::size_t i = 1; i < records.size(); ++i) {
            if (records[i].l2 > records[best].l2 ||
                (records[i].l2 == records[best].l2 &&
                 records[i].token_position < records[best].token_position)) {
                best = i;
            }
        }
        retained.push_back(records[best].token_position);
        if (used_fallback != nullptr) {
            *used_fallback = true;
        }
    }
    std::sort(retained.begin(), retained.end());
    return retained;
}

std::vector<std::size_t> select_baseline(const LayerTrace& trace, Selector strategy,
                                         std::size_t k) {
    if (strategy == Selector::kValueAware) {
        throw InputError("select_baseline: value-aware is not an attention baseline");
    }
    std::vector<std::pair<double, std::size_t>> mass_by_position;
    std::vector<std::size_t> vision_cols;
    for (std::size_t j = 0; j < trace.col_positions.size(); ++j) {
        if (trace.col_modalities[j] == Modality::kVision) {
            vision_cols.push_back(j);
        }
    }
    if (k > vision_cols.size()) {
        throw InputError("select_baseline: k exceeds the number of vision tokens");
    }
    auto row_selected = [&](std::size_t i) {
        switch (strategy) {
            case Selector::kAttnLast: return i == trace.row_positions.size() - 1;
            case Selector::kAttnText: return trace.row_modalities[i] == Modality::kInstruction;
            case Selector::kAttnVis: return trace.row_modalities[i] == Modality::kVision;
            default: return false;
        }
    };
    for (std::size_t j : vision_cols) {
        double mass = 0.0;
        for (std::size_t i = 0; i < trace.row_positions.size(); ++i) {
            if (!row_selected(i)) {
                continue;
            }
            for (const auto& w : trace.weights) {
                mass += w.at(i, j);
            }
        }
        mass_by_position.emplace_back(mass, trace.col_positions[j]);
    }
    std::sort(mass_by_position.begin(), mass_by_position.end(),
              [](const auto& a, const auto& b) {
                  if (a.first != b.first) {
                      return a.first > b.first;
                  }
                  return a.second < b.second;
              });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < k; ++i) {
        out.push_back(mass_by_position[i].second);
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::optional<std::size_t> detect_exit_layer(const std::vector<LayerInfluences>& history,
                                             const PruneParams& params) {
    std::size_t run = 0;
    for (std::size_t i = 0; i < history.size(); ++i) {
        if (i > 0 && history[i].layer != history[i - 1].layer + 1) {
            throw InputError("detect_exit_layer: history must cover consecutive layers");
        }
        bool no_impact = true;
        for (const auto& r : history[i].records) {
            if (record_has_impact(r, params)) {
                no_impact = false;
                break;
            }
        }
        run = no_impact ? run + 1 : 0;
        if (run >= params.exit_patience) {
            return history[i].layer;
        }
    }
    return std::nullopt;
}

ScheduleRunResult apply_schedule(const engine::Model& model, const engine::TokenStream& stream,
                                 const PruneParams& params, const ScheduleRunOptions& options) {
    params.validate();
    stream.validate();
    if (stream.n_vision() < 1) {
        throw InputError("apply_schedule: multimodal run requires at least one vision token");
    }
    if (params.merge_target_offset >= stream.n_vision()) {
        throw InputError("apply_schedule: merge target offset beyond the vision segment");
    }
    if (params.detection_enabled && params.probe_start_layer > model.config.num_layers) {
        throw InputError("apply_schedule: probe_start_layer is beyond the last layer");
    }
    const std::size_t num_layers = model.config.num_layers;

    ScheduleRunResult result;
    result.schedule.params = params;
    result.schedule.modes.assign(num_layers, LayerMode::kDense);
    result.cache = make_cache(model);

    Sequence seq = make_sequence(model, stream);
    const std::size_t merge_position =
        stream.positions_of(Modality::kVision)[params.merge_target_offset];

    engine::AttentionHooks merge_hooks;
    merge_hooks.reweight = [merge_position](std::size_t, std::size_t, std::size_t,
                                            Modality row_mod, std::span<double> weights,
                                            std::span<const std::size_t> col_positions,
                                            std::span<const Modality> col_modalities) {
        // Merging targets cross-attention: every text row focuses its vision
        // mass on one column. Vision rows keep their own weights.
        if (row_mod != Modality::kVision) {
            merge_row(weights, col_positions, col_modalities, merge_position);
        }
    };

    std::map<std::size_t, LayerTrace> traces_by_layer;

    auto run_layer = [&](std::size_t layer, const std::vector<std::size_t>& rows,
                         const std::vector<std::size_t>& cols,
                         const engine::AttentionHooks* hooks) {
        engine::LayerForwardSpec spec;
        spec.layer = layer;
        spec.attend_rows = rows;
        spec.key_cols = cols;
        spec.hooks = hooks;
        spec.capture_trace = options.capture_traces;
        spec.counter = options.counter;
        spec.cache = &result.cache;
        auto trace = engine::layer_forward(model, seq.hidden, seq.positions, seq.modalities, spec);
        if (trace.has_value()) {
            traces_by_layer[layer] = std::move(*trace);
        }
    };

    enum class Phase { kShallow, kSparse, kVisionFree };
    Phase phase = Phase::kShallow;
    std::size_t no_impact_run = 0;
    std::optional<Sequence> checkpoint;

    for (std::size_t layer = 1; layer <= num_layers; ++layer) {
        if (params.detection_enabled && layer == params.probe_start_layer &&
            phase == Phase::kShallow) {
            checkpoint = seq;  // restart point for the dense fallback
        }

        std::vector<InfluenceRecord> records;
        const bool probed = params.detection_enabled && layer >= params.probe_start_layer &&
                            phase != Phase::kVisionFree;
        if (probed) {
            const auto probe = engine::probe_last_row(model, seq.hidden, seq.positions,
                                                      seq.modalities, layer, options.counter);
            records = probe_influences(probe, layer);
            result.probe_records.push_back({layer, records});
            result.schedule.probed_layers.push_back(layer);
        }

        if (phase == Phase::kShallow) {
            bool fired = false;
            for (const auto& r : records) {
                fired = fired || r.cosine < params.theta_cos;
            }
            if (fired) {
                result.schedule.filtering_layer = layer;
                bool used_fallback = false;
                result.schedule.retained = select_retained(records, params, &used_fallback);
                result.schedule.empty_retained_fallback = used_fallback;
                seq.drop_vision_except(result.schedule.retained);
                phase = Phase::kSparse;
                no_impact_run = 0;  // the filtering layer itself showed impact
                result.schedule.modes[layer - 1] = LayerMode::kSparse;
                run_layer(layer, seq.all_indices(), seq.all_indices(), nullptr);
                continue;
            }
            if (layer <= params.merge_layer) {
                if (params.merge_enabled && layer == params.merge_layer) {
                    result.schedule.modes[layer - 1] = LayerMode::kMerge;
                    run_layer(layer, seq.all_indices(), seq.all_indices(), &merge_hooks);
                } else {
                    result.schedule.modes[layer - 1] = LayerMode::kDense;
                    run_layer(layer, seq.all_indices(), seq.all_indices(), nullptr);
                }
            } else if (params.shallow_skip_enabled) {
                result.schedule.modes[layer - 1] = LayerMode::kSkip;
                const auto text = seq.text_indices();
                run_layer(layer, text, text, nullptr);
            } else {
                result.schedule.modes[layer - 1] =
                    probed ? LayerMode::kDenseProbe : LayerMode::kDense;
                run_layer(layer, seq.all_indices(), seq.all_indices(), nullptr);
            }
        } else if (phase == Phase::kSparse) {
            bool no_impact = true;
            for (const auto& r : records) {
                no_impact = no_impact && !record_has_impact(r, params);
            }
            no_impact = probed && no_impact;
            no_impact_run = no_impact ? no_impact_run + 1 : 0;
            if (params.detection_enabled && no_impact_run >= params.exit_patience) {
                result.schedule.exit_layer = layer;
                phase = Phase::kVisionFree;
                seq.drop_vision_except({});
                result.schedule.modes[layer - 1] = LayerMode::kVisionFree;
                run_layer(layer, seq.all_indices(), seq.all_indices(), nullptr);
            } else {
                result.schedule.modes[layer - 1] = LayerMode::kSparse;
                run_layer(layer, seq.all_indices(), seq.all_indices(), nullptr);
            }
        } else {
            result.schedule.modes[layer - 1] = LayerMode::kVisionFree;
            run_layer(layer, seq.all_indices(), seq.all_indices(), nullptr);
        }
    }

    // Filtering never fired: restart dense from the probe start so the run
    // still fuses vision, and flag the schedule.
    if (params.detection_enabled && !result.schedule.filtering_layer.has_value() &&
        checkpoint.has_value()) {
        result.schedule.fallback_dense = true;
        seq = std::move(*checkpoint);
        for (std::size_t layer = params.probe_start_layer; layer <= num_layers; ++layer) {
            clear_cache_layer(result.cache, layer);
            result.schedule.modes[layer - 1] = LayerMode::kDenseProbe;
            run_layer(layer, seq.all_indices(), seq.all_indices(), nullptr);
        }
    }

    result.logits = engine::unembed(model, seq.hidden.row(seq.size() - 1), options.counter);
    result.cache.next_position = stream.size();
    result.final_sequence_length = seq.size();

    // Vision never serves decode-time attention in shallow layers; drop it
    // from their KV now. Sparse layers keep the retained tokens.
    std::vector<std::size_t> evict_layers;
    for (std::size_t layer = 1; layer <= num_layers; ++layer) {
        const LayerMode mode = result.schedule.modes[layer - 1];
        if (mode == LayerMode::kMerge || mode == LayerMode::kSkip) {
            evict_layers.push_back(layer);
        }
    }
    result.cache = evict_vision_kv(std::move(result.cache), evict_layers);

    for (auto& [layer, trace] : traces_by_layer) {
        result.traces.push_back(std::move(trace));
    }
    result.schedule.validate();
    return result;
}

engine::KvCache evict_vision_kv(engine::KvCache cache, const std::vector<std::size_t>& layers) {
    for (std::size_t layer : layers) {
        if (layer < 1 || layer > cache.num_layers()) {
            throw InputError("evict_vision_kv: layer " + std::to_string(layer) +
                             " out of range");
        }
        auto& l = cache.layers[layer - 1];
        std::vector<std::size_t> keep;
        for (std::size_t i = 0; i < l.entries.size(); ++i) {
            if (l.entries[i].modality != Modality::kVision) {
                keep.push_back(i);
            }
        }
        if (keep.size() == l.entries.size()) {
            continue;
        }
        std::vector<engine::KvEntry> entries;
        entries.reserve(keep.size());
        for (std::size_t i : keep) {
            entries.push_back(l.entries[i]);
        }
        l.entries = std::move(entries);
        for (auto& per_head : l.keys) {
            std::vector<std::vector<double>> rows;
            rows.reserve(keep.size());
            for (std::size_t i : keep) {
                rows.push_back(std::move(per_head[i]));
            }
            per_head = std::move(rows);
        }
        for (auto& per_head : l.values) {
            std::vector<std::vector<double>> rows;
            rows.reserve(keep.size());
            for (std::size_t i : keep) {
                rows.push_back(std::move(per_head[i]));
            }
            per_head = std::move(rows);
        }
    }
    return cache;
}

}  // namespace visipruner::pruner
