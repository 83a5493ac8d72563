// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "visipruner/cost.hpp"
#include "visipruner/probes.hpp"
#include "visipruner/pruner.hpp"

namespace visipruner::report {

// One trace record (a single JSONL line, no trailing newline): layer index,
// per-head last-row attention, value L1 norms and hidden-state norms, plus
// full matrices behind the flag.
std::string trace_record_json(const engine::LayerTrace& trace, bool full_matrices);

std::string schedule_json(const pruner::PruneSchedule& schedule, int indent = 2);

std::string paper_flops_json(const cost::PaperFlopsReport& report, int indent = 2);

struct MacConventionReport {
    cost::MacBreakdown dense;
    cost::MacBreakdown pruned;
    bool reconciled = false;  // when an instrumented run was compared
    cost::Reconciliation dense_reconciliation;
    cost::Reconciliation pruned_reconciliation;
};

std::string mac_flops_json(const MacConventionReport& report, int indent = 2);

std::string influence_sweep_json(const std::vector<pruner::LayerInfluences>& sweeps,
                                 int indent = 2);

std::string mask_probe_json(const probes::MaskProbeReport& report, int indent = 2);

std::string sink_report_json(const probes::SinkReport& report, int indent = 2);

std::string lens_json(const probes::LensResult& lens, int indent = 2);

std::string vo_projection_json(const probes::VoProjection& vo, std::size_t layer,
                               std::size_t head, int indent = 2);

// CSV with header: n_vision,n_text,middle_layers,retained,attention_reduction,
// visual_flops_reduction,total_flops_reduction
std::string sweep_csv(const std::vector<cost::SweepRow>& rows);

// CSV with header: probe,layers,delta_l2,delta_max_abs,argmax_changed
std::string probe_series_csv(const std::vector<probes::MaskProbeReport>& reports);

}  // namespace visipruner::report
