// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include "visipruner/probes.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "visipruner/errors.hpp"

namespace visipruner::probes {

using engine::Modality;

namespace {

std::size_t argmax_index(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) {
            best = i;
        }
    }
    return best;
}

LogitDelta logit_delta(const std::vector<double>& dense, const std::vector<double>& probed) {
    LogitDelta d;
    double acc = 0.0;
    for (std::size_t i = 0; i < dense.size(); ++i) {
        const double diff = std::fabs(dense[i] - probed[i]);
        d.max_abs = std::max(d.max_abs, diff);
        acc += diff * diff;
    }
    d.l2 = std::sqrt(acc);
    d.dense_argmax = argmax_index(dense);
    d.probed_argmax = argmax_index(probed);
    d.argmax_changed = d.dense_argmax != d.probed_argmax;
    return d;
}

void check_layers(const engine::Model& model, const std::vector<std::size_t>& layers) {
    for (std::size_t l : layers) {
        if (l < 1 || l > model.config.num_layers) {
            throw InputError("probe: layer " + std::to_string(l) + " out of range");
        }
    }
}

MaskProbeReport run_masked(const engine::Model& model, const engine::TokenStream& stream,
                           const std::vector<std::size_t>& layers,
                           const std::vector<std::vector<std::size_t>>& masked_sets,
                           bool mask_vision_rows_too, std::string kind) {
    check_layers(model, layers);
    const std::set<std::size_t> layer_set(layers.begin(), layers.end());
    std::vector<std::set<std::size_t>> sets;
    sets.reserve(masked_sets.size());
    std::set<std::size_t> all_masked;
    for (const auto& s : masked_sets) {
        sets.emplace_back(s.begin(), s.end());
        all_masked.insert(s.begin(), s.end());
    }

    const auto dense = engine::prefill(model, stream);

    engine::PrefillOptions options;
    options.zero_output_on_degenerate = true;
    options.hooks.allow = [&](std::size_t layer, std::size_t, Modality row_mod,
                              std::size_t col_pos, Modality col_mod) {
        if (col_mod != Modality::kVision || layer_set.count(layer) == 0) {
            return true;
        }
        if (row_mod != Modality::kVision || mask_vision_rows_too) {
            for (const auto& s : sets) {
                if (s.count(col_pos) != 0) {
                    return false;
                }
            }
        }
        return true;
    };
    const auto probed = engine::prefill(model, stream, options);

    MaskProbeReport report;
    report.kind = std::move(kind);
    report.layers = layers;
    report.masked_positions.assign(all_masked.begin(), all_masked.end());
    report.delta = logit_delta(dense.logits, probed.logits);
    report.degenerate_rows = probed.degenerate_rows;
    report.probed_logits = probed.logits;
    return report;
}

std::vector<std::size_t> all_vision_positions(const engine::TokenStream& stream) {
    return stream.positions_of(Modality::kVision);
}

}  // namespace

MaskProbeReport knockout_cross_attention(const engine::Model& model,
                                         const engine::TokenStream& stream,
                                         const std::vector<std::size_t>& layers,
                                         KnockoutMode mode) {
    return run_masked(model, stream, layers, {all_vision_positions(stream)},
                      mode == KnockoutMode::kCrossAndVision,
                      mode == KnockoutMode::kCrossAndVision ? "knockout-c&v" : "knockout-c");
}

std::vector<std::size_t> select_masked_positions(const engine::LayerTrace& trace,
                                                 double fraction, MaskWhich which,
                                                 MaskCriterion criterion) {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw InputError("select_masked_positions: fraction must be in (0, 1]");
    }
    struct Scored {
        double score;
        std::size_t position;
    };
    std::vector<Scored> scored;
    for (std::size_t j = 0; j < trace.col_positions.size(); ++j) {
        if (trace.col_modalities[j] != Modality::kVision) {
            continue;
        }
        double score = 0.0;
        switch (criterion) {
            case MaskCriterion::kAttnLast:
                score = trace.last_row_mass(j);
                break;
            case MaskCriterion::kAttnText:
                for (std::size_t i = 0; i < trace.row_positions.size(); ++i) {
                    if (trace.row_modalities[i] != Modality::kInstruction) {
                        continue;
                    }
                    for (const auto& w : trace.weights) {
                        score += w.at(i, j);
                    }
                }
                break;
            case MaskCriterion::kPosNearText:
                score = static_cast<double>(trace.col_positions[j]);
                break;
        }
        scored.push_back({score, trace.col_positions[j]});
    }
    if (scored.empty()) {
        throw InputError("select_masked_positions: no vision columns in trace");
    }
    const std::size_t count = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::llround(fraction * static_cast<double>(scored.size()))));
    const bool descending = which == MaskWhich::kTop;
    std::sort(scored.begin(), scored.end(), [descending](const Scored& a, const Scored& b) {
        if (a.score != b.score) {
            return descending ? a.score > b.score : a.score < b.score;
        }
        return a.position < b.position;
    });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < count && i < scored.size(); ++i) {
        out.push_back(scored[i].position);
    }
    std::sort(out.begin(), out.end());
    return out;
}

MaskProbeReport mask_attended_tokens(const engine::Model& model,
                                     const engine::TokenStream& stream,
                                     const std::vector<std::size_t>& layers, double fraction,
                                     MaskWhich which, MaskCriterion criterion) {
    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto dense = engine::prefill(model, stream, options);
    const auto positions = select_masked_positions(dense.traces[0], fraction, which, criterion);
    auto report = run_masked(model, stream, layers, {positions}, false, "mask-attended");
    return report;
}

MaskProbeReport mask_half(const engine::Model& model, const engine::TokenStream& stream,
                          const std::vector<std::size_t>& layers, MaskSide side) {
    const auto vision = all_vision_positions(stream);
    if (vision.size() < 2) {
        throw InputError("mask_half: needs at least two vision tokens");
    }
    const std::size_t left_count = (vision.size() + 1) / 2;
    std::vector<std::size_t> masked;
    if (side == MaskSide::kLeft) {
        masked.assign(vision.begin(), vision.begin() + left_count);
    } else {
        masked.assign(vision.begin() + left_count, vision.end());
    }
    return run_masked(model, stream, layers, {masked}, false,
                      side == MaskSide::kLeft ? "mask-half-left" : "mask-half-right");
}

MaskProbeReport mask_vision_positions(const engine::Model& model,
                                      const engine::TokenStream& stream,
                                      const std::vector<std::size_t>& layers,
                                      const std::vector<std::vector<std::size_t>>& position_sets) {
    return run_masked(model, stream, layers, position_sets, false, "mask-set");
}

LensResult logit_lens(const engine::Model& model, std::span<const double> hidden,
                      std::size_t top_n) {
    const auto logits = engine::unembed(model, hidden);
    LensResult out;
    const std::vector<std::uint8_t> allow(logits.size(), 1);
    out.distribution = kernels::masked_softmax_row(logits, allow);
    std::vector<std::size_t> ids(logits.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        ids[i] = i;
    }
    std::sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
        if (out.distribution[a] != out.distribution[b]) {
            return out.distribution[a] > out.distribution[b];
        }
        return a < b;
    });
    ids.resize(std::min(top_n, ids.size()));
    out.top_ids = std::move(ids);
    return out;
}

VoProjection vo_projection(const engine::Model& model, std::size_t layer, std::size_t head,
                           std::span<const double> value_last, std::size_t top_n,
                           bool apply_softmax) {
    if (layer < 1 || layer > model.config.num_layers) {
        throw InputError("vo_projection: layer out of range");
    }
    if (head >= model.config.num_heads) {
        throw InputError("vo_projection: head out of range");
    }
    const std::size_t head_dim = model.config.head_dim();
    if (value_last.size() != head_dim) {
        throw InputError("vo_projection: value vector must have head_dim entries");
    }
    std::vector<double> embedded(model.config.hidden_dim, 0.0);
    for (std::size_t t = 0; t < head_dim; ++t) {
        embedded[head * head_dim + t] = value_last[t];
    }
    const auto projected = kernels::vecmat(embedded, model.layers[layer - 1].w_o);
    VoProjection out;
    out.scores = engine::unembed(model, projected);
    if (apply_softmax) {
        const std::vector<std::uint8_t> allow(out.scores.size(), 1);
        out.softmaxed = kernels::masked_softmax_row(out.scores, allow);
    }
    std::vector<std::size_t> ids(out.scores.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        ids[i] = i;
    }
    std::sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
        if (out.scores[a] != out.scores[b]) {
            return out.scores[a] > out.scores[b];
        }
        return a < b;
    });
    ids.resize(std::min(top_n, ids.size()));
    out.top_ids = std::move(ids);
    return out;
}

namespace {

double percentile90_linear(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    const double idx = 0.9 * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(idx);
    const double frac = idx - static_cast<double>(lo);
    if (lo + 1 >= values.size()) {
        return values.back();
    }
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

double median_of(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

SinkReport sink_stats(const engine::LayerTrace& trace) {
    SinkReport report;
    report.layer = trace.layer;
    std::vector<double> masses;
    std::vector<double> l1s;
    for (std::size_t j = 0; j < trace.col_positions.size(); ++j) {
        const double mass = trace.last_row_mass(j);
        switch (trace.col_modalities[j]) {
            case Modality::kSystem: report.system_mass += mass; break;
            case Modality::kVision: report.vision_mass += mass; break;
            case Modality::kInstruction: report.instruction_mass += mass; break;
        }
        if (trace.col_modalities[j] != Modality::kVision) {
            continue;
        }
        SinkTokenStat stat;
        stat.position = trace.col_positions[j];
        stat.last_row_mass = mass;
        stat.value_l1 = trace.value_l1[j];
        report.tokens.push_back(stat);
        masses.push_back(mass);
        l1s.push_back(stat.value_l1);
    }
    if (report.tokens.empty()) {
        return report;
    }
    report.mass_p90 = percentile90_linear(masses);
    report.value_l1_median = median_of(l1s);
    for (auto& stat : report.tokens) {
        stat.sink_flag = stat.last_row_mass > report.mass_p90 &&
                         stat.value_l1 < report.value_l1_median;
    }
    return report;
}

}  // namespace visipruner::probes
