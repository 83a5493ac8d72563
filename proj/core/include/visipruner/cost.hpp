// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "visipruner/pruner.hpp"

namespace visipruner::cost {

// Schedule summary feeding the closed-form model. shallow_layers keep the
// full vision segment but skip its attention; middle_layers interact with
// the retained set only; layers beyond the exit carry no vision at all.
struct ScheduleSummary {
    std::size_t shallow_layers = 0;  // includes the merge layer
    std::size_t middle_layers = 0;   // L', cross-modal interaction layers
    std::size_t retained = 0;        // n_v'
    std::size_t filtering_layer = 0; // 1-based, 0 = undetected (KV accounting)
    std::size_t exit_layer = 0;      // 1-based, 0 = undetected
};

struct CostParams {
    std::size_t num_layers = 0;  // L
    std::size_t hidden_dim = 0;  // d
    std::size_t ffn_dim = 0;     // m
    std::size_t n_vision = 0;    // n_v
    std::size_t n_text = 0;      // n_t (system + instruction)
    std::size_t vocab_size = 0;  // 0 drops the unembedding term
    ScheduleSummary schedule;

    std::size_t n_total() const { return n_vision + n_text; }
    void validate() const;
};

// LLaVA-v1.5-7B shape with the reconstructed schedule: shallow skipping
// through layer 8, filtering at 9, exit at 24, 10 retained tokens.
CostParams llava7b_preset();

struct KvReport {
    std::uint64_t dense_entries = 0;   // stored doubles: positions * 2 * d
    std::uint64_t pruned_entries = 0;
    double total_reduction = 0.0;
    std::uint64_t vision_dense_entries = 0;
    std::uint64_t vision_pruned_entries = 0;
    double vision_reduction = 0.0;
};

KvReport kv_memory(const CostParams& params);

// --- paper convention -------------------------------------------------
// Per layer the dense census counts attention scores 2n^2 d, projections
// 4nd^2 and FFN 3ndm. The reduction ratios instead follow the source
// formulas, which track attention scores and FFN only on the dense side
// while the pruned visual tally keeps its projection terms; both readings
// are reported and tagged rather than reconciled.

struct PaperBreakdown {
    std::uint64_t attn_scores = 0;
    std::uint64_t attn_projections = 0;
    std::uint64_t ffn = 0;
    std::uint64_t total() const { return attn_scores + attn_projections + ffn; }
};

struct PaperFlopsReport {
    PaperBreakdown dense;                       // full census
    std::uint64_t dense_total = 0;
    std::uint64_t dense_visual_scores_ffn = 0;  // reduction baselines
    std::uint64_t dense_text_scores_ffn = 0;
    std::uint64_t pruned_visual = 0;            // shallow + middle sums
    PaperBreakdown pruned;                      // pruned visual + unchanged text
    std::uint64_t pruned_total_scores_ffn = 0;
    double visual_attention_reduction = 0.0;    // R, clamped to [0, 1]
    double visual_attention_reduction_raw = 0.0;
    double visual_flops_reduction = 0.0;
    double visual_flops_reduction_raw = 0.0;
    double total_flops_reduction = 0.0;
    double total_flops_reduction_raw = 0.0;
    KvReport kv;
    std::vector<std::string> notes;
};

PaperBreakdown paper_dense_breakdown(const CostParams& params);

// Raw attention-reduction formula with the layer count generalized; the
// value can leave [0, 1] at full retention and the report clamps it.
double visual_attention_reduction(const CostParams& params);

PaperFlopsReport paper_flops(const CostParams& params);

struct SweepRow {
    std::size_t n_vision = 0;
    std::size_t n_text = 0;
    std::size_t middle_layers = 0;
    std::size_t retained = 0;
    double visual_attention_reduction = 0.0;
    double visual_flops_reduction = 0.0;
    double total_flops_reduction = 0.0;
};

std::vector<SweepRow> sweep_vision_lengths(const CostParams& base,
                                           const std::vector<std::size_t>& vision_lengths);

// --- mac convention ----------------------------------------------------
// Mirrors every matmul the engine executes; one FLOP pair (multiply + add)
// per multiply-accumulate, so flops = 2 * macs. Reconciliation against the
// instrumented counter must be exact.

struct MacModelInput {
    std::size_t hidden_dim = 0;
    std::size_t ffn_dim = 0;
    std::size_t vocab_size = 0;
    std::size_t n_text = 0;
    std::size_t n_vision = 0;
};

struct MacBreakdown {
    std::uint64_t attn_projections = 0;
    std::uint64_t attn_scores = 0;  // score and weighted-sum matmuls
    std::uint64_t ffn = 0;
    std::uint64_t probe_overhead = 0;  // influence side channels
    std::uint64_t unembed = 0;
    std::uint64_t total() const {
        return attn_projections + attn_scores + ffn + probe_overhead + unembed;
    }
};

MacBreakdown mac_dense_prefill(const MacModelInput& input, std::size_t num_layers);

// Replays the realized per-layer modes of a schedule run.
MacBreakdown mac_schedule_prefill(const MacModelInput& input,
                                  const pruner::PruneSchedule& schedule);

// One decode step; lengths are per-layer cache sizes after the new row is
// appended.
MacBreakdown mac_decode_step(const MacModelInput& input,
                             const std::vector<std::size_t>& cache_len_after_append);

struct Reconciliation {
    std::uint64_t analytical_macs = 0;
    std::uint64_t counted_macs = 0;
    std::uint64_t analytical_flops = 0;  // 2 * macs
    bool exact = false;
};

// Exact comparison of the closed form against the instrumented counter; a
// mismatch is an accounting bug, not noise.
Reconciliation reconcile(const MacBreakdown& analytical, const kernels::MacCounter& counter);

}  // namespace visipruner::cost
