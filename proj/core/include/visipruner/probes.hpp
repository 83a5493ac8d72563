// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "visipruner/engine.hpp"

namespace visipruner::probes {

struct LogitDelta {
    double max_abs = 0.0;
    double l2 = 0.0;
    bool argmax_changed = false;
    std::size_t dense_argmax = 0;
    std::size_t probed_argmax = 0;
};

// Outcome of one masking experiment against the dense baseline. Masked runs
// renormalize over the surviving columns (mask-before-softmax).
struct MaskProbeReport {
    std::string kind;
    std::vector<std::size_t> layers;
    std::vector<std::size_t> masked_positions;
    LogitDelta delta;
    std::size_t degenerate_rows = 0;
    std::vector<double> probed_logits;
};

enum class KnockoutMode : std::uint8_t {
    kCross,           // text rows stop attending vision columns
    kCrossAndVision,  // vision self-attention is masked as well
};

MaskProbeReport knockout_cross_attention(const engine::Model& model,
                                         const engine::TokenStream& stream,
                                         const std::vector<std::size_t>& layers,
                                         KnockoutMode mode);

enum class MaskWhich : std::uint8_t { kTop, kBottom };
enum class MaskCriterion : std::uint8_t {
    kAttnLast,     // attention mass from the last input row
    kAttnText,     // attention mass from the instruction rows
    kPosNearText,  // positions closest to the instruction segment
};

// Masks round(fraction * n_vision) vision columns (at least one) in the given
// layers; the selection always comes from the dense run's layer-1 trace.
MaskProbeReport mask_attended_tokens(const engine::Model& model,
                                     const engine::TokenStream& stream,
                                     const std::vector<std::size_t>& layers, double fraction,
                                     MaskWhich which, MaskCriterion criterion);

enum class MaskSide : std::uint8_t { kLeft, kRight };

// Left masks the first ceil(n_v/2) vision columns, right the last floor(n_v/2).
MaskProbeReport mask_half(const engine::Model& model, const engine::TokenStream& stream,
                          const std::vector<std::size_t>& layers, MaskSide side);

// Masks the union of the given position sets, applied one after another; a
// single-set call is the plain set mask.
MaskProbeReport mask_vision_positions(const engine::Model& model,
                                      const engine::TokenStream& stream,
                                      const std::vector<std::size_t>& layers,
                                      const std::vector<std::vector<std::size_t>>& position_sets);

// Which vision positions a criterion picks on a layer-1 trace (exposed so
// selection can be inspected without running the masked pass).
std::vector<std::size_t> select_masked_positions(const engine::LayerTrace& layer1_trace,
                                                 double fraction, MaskWhich which,
                                                 MaskCriterion criterion);

struct LensResult {
    std::vector<double> distribution;  // softmax(W_u h)
    std::vector<std::size_t> top_ids;  // by probability, lower id on ties
};

LensResult logit_lens(const engine::Model& model, std::span<const double> hidden,
                      std::size_t top_n = 10);

struct VoProjection {
    std::vector<double> scores;     // W_u (value embedded in its head slice * W_O)
    std::vector<double> softmaxed;  // filled only when requested
    std::vector<std::size_t> top_ids;
};

// Semantic reading of one head's value vector through the output projection
// and the unembedding. Raw scores by default; softmax is a display option.
VoProjection vo_projection(const engine::Model& model, std::size_t layer, std::size_t head,
                           std::span<const double> value_last, std::size_t top_n = 10,
                           bool apply_softmax = false);

struct SinkTokenStat {
    std::size_t position = 0;
    double last_row_mass = 0.0;  // summed over heads
    double value_l1 = 0.0;
    bool sink_flag = false;
};

struct SinkReport {
    std::size_t layer = 0;
    std::vector<SinkTokenStat> tokens;
    double mass_p90 = 0.0;
    double value_l1_median = 0.0;
    // Redistribution inputs: where the last row's mass sits per segment.
    double system_mass = 0.0;
    double vision_mass = 0.0;
    double instruction_mass = 0.0;
};

// A vision token is flagged as a sink when its received attention is strictly
// above the interpolated 90th percentile and its value L1 norm strictly below
// the median. The codified rule stands in for a qualitative description and
// is reported alongside the raw statistics.
SinkReport sink_stats(const engine::LayerTrace& trace);

}  // namespace visipruner::probes
