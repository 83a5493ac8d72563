// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include "visipruner/report_json.hpp"

#include <cstdio>

#include "json.hpp"

namespace visipruner::report {

using nlohmann::json;

namespace {

json matrix_json(const kernels::RealMatrix& m) {
    json rows = json::array();
    for (std::size_t i = 0; i < m.rows; ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < m.cols; ++j) {
            row.push_back(m.at(i, j));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

json modalities_json(const std::vector<engine::Modality>& mods) {
    json out = json::array();
    for (const auto m : mods) {
        out.push_back(engine::modality_name(m));
    }
    return out;
}

json breakdown_json(const cost::MacBreakdown& b) {
    return json{{"attn_projections", b.attn_projections},
                {"attn_scores", b.attn_scores},
                {"ffn", b.ffn},
                {"probe_overhead", b.probe_overhead},
                {"unembed", b.unembed},
                {"total_macs", b.total()},
                {"total_flops", 2 * b.total()}};
}

json delta_json(const probes::LogitDelta& d) {
    return json{{"max_abs", d.max_abs},
                {"l2", d.l2},
                {"argmax_changed", d.argmax_changed},
                {"dense_argmax", d.dense_argmax},
                {"probed_argmax", d.probed_argmax}};
}

json influence_json(const pruner::InfluenceRecord& r) {
    return json{{"layer", r.layer},
                {"position", r.token_position},
                {"cosine", r.cosine},
                {"l2", r.l2},
                {"attention_mass", r.attention_mass}};
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::string trace_record_json(const engine::LayerTrace& trace, bool full_matrices) {
    json record;
    record["layer"] = trace.layer;
    record["col_positions"] = trace.col_positions;
    record["col_modalities"] = modalities_json(trace.col_modalities);

    json last_row = json::array();
    if (!trace.row_positions.empty()) {
        const std::size_t last = trace.row_positions.size() - 1;
        for (const auto& w : trace.weights) {
            json head = json::array();
            for (std::size_t j = 0; j < w.cols; ++j) {
                head.push_back(w.at(last, j));
            }
            last_row.push_back(std::move(head));
        }
    }
    record["last_row_attention"] = std::move(last_row);
    record["value_l1"] = trace.value_l1;

    json hidden_norms = json::array();
    for (std::size_t i = 0; i < trace.hidden_out.rows; ++i) {
        hidden_norms.push_back(kernels::l2_norm(trace.hidden_out.row(i)));
    }
    record["hidden_l2"] = std::move(hidden_norms);
    record["seq_positions"] = trace.seq_positions;

    if (full_matrices) {
        json full;
        json weights = json::array();
        json values = json::array();
        for (const auto& w : trace.weights) {
            weights.push_back(matrix_json(w));
        }
        for (const auto& v : trace.values) {
            values.push_back(matrix_json(v));
        }
        full["weights"] = std::move(weights);
        full["values"] = std::move(values);
        full["attn_output"] = matrix_json(trace.attn_output);
        full["hidden_in"] = matrix_json(trace.hidden_in);
        full["hidden_out"] = matrix_json(trace.hidden_out);
        record["full"] = std::move(full);
    }
    return record.dump();
}

std::string schedule_json(const pruner::PruneSchedule& schedule, int indent) {
    json out;
    out["filtering_layer"] =
        schedule.filtering_layer.has_value() ? json(*schedule.filtering_layer) : json(nullptr);
    out["exit_layer"] =
        schedule.exit_layer.has_value() ? json(*schedule.exit_layer) : json(nullptr);
    out["retained_positions"] = schedule.retained;
    json modes = json::array();
    for (const auto m : schedule.modes) {
        modes.push_back(pruner::layer_mode_name(m));
    }
    out["per_layer_modes"] = std::move(modes);
    out["probed_layers"] = schedule.probed_layers;
    out["fallback_flags"] = json{{"dense_fallback", schedule.fallback_dense},
                                 {"empty_retained_fallback", schedule.empty_retained_fallback}};
    out["params"] = json{{"merge_layer", schedule.params.merge_layer},
                         {"probe_start_layer", schedule.params.probe_start_layer},
                         {"theta_cos", schedule.params.theta_cos},
                         {"theta_l2", schedule.params.theta_l2},
                         {"exit_patience", schedule.params.exit_patience},
                         {"selector", pruner::selector_name(schedule.params.selector)},
                         {"baseline_top_k", schedule.params.baseline_top_k},
                         {"merge_enabled", schedule.params.merge_enabled},
                         {"shallow_skip_enabled", schedule.params.shallow_skip_enabled},
                         {"detection_enabled", schedule.params.detection_enabled},
                         {"merge_target_offset", schedule.params.merge_target_offset}};
    return out.dump(indent);
}

std::string paper_flops_json(const cost::PaperFlopsReport& report, int indent) {
    json out;
    out["convention"] = "paper";
    out["dense"] = json{{"attn_scores", report.dense.attn_scores},
                        {"attn_projections", report.dense.attn_projections},
                        {"ffn", report.dense.ffn},
                        {"total", report.dense_total}};
    out["pruned"] = json{{"attn_scores", report.pruned.attn_scores},
                         {"attn_projections", report.pruned.attn_projections},
                         {"ffn", report.pruned.ffn},
                         {"total_scores_ffn", report.pruned_total_scores_ffn},
                         {"visual", report.pruned_visual}};
    out["baselines"] = json{{"dense_visual_scores_ffn", report.dense_visual_scores_ffn},
                            {"dense_text_scores_ffn", report.dense_text_scores_ffn}};
    out["reductions"] = json{{"visual_attention", report.visual_attention_reduction},
                             {"visual_attention_raw", report.visual_attention_reduction_raw},
                             {"visual_flops", report.visual_flops_reduction},
                             {"visual_flops_raw", report.visual_flops_reduction_raw},
                             {"total_flops", report.total_flops_reduction},
                             {"total_flops_raw", report.total_flops_reduction_raw}};
    out["kv"] = json{{"dense_entries", report.kv.dense_entries},
                     {"pruned_entries", report.kv.pruned_entries},
                     {"total_reduction", report.kv.total_reduction},
                     {"vision_dense_entries", report.kv.vision_dense_entries},
                     {"vision_pruned_entries", report.kv.vision_pruned_entries},
                     {"vision_reduction", report.kv.vision_reduction}};
    out["notes"] = report.notes;
    return out.dump(indent);
}

std::string mac_flops_json(const MacConventionReport& report, int indent) {
    json out;
    out["convention"] = "mac";
    out["dense"] = breakdown_json(report.dense);
    out["pruned"] = breakdown_json(report.pruned);
    const double dense_total = static_cast<double>(report.dense.total());
    const double pruned_total = static_cast<double>(report.pruned.total());
    const double without_probes =
        static_cast<double>(report.pruned.total() - report.pruned.probe_overhead);
    json reductions;
    reductions["total_flops"] = dense_total > 0.0 ? 1.0 - pruned_total / dense_total : 0.0;
    reductions["total_flops_excluding_probes"] =
        dense_total > 0.0 ? 1.0 - without_probes / dense_total : 0.0;
    out["reductions"] = std::move(reductions);
    if (report.reconciled) {
        out["reconciliation"] =
            json{{"dense",
                  json{{"analytical_macs", report.dense_reconciliation.analytical_macs},
                       {"counted_macs", report.dense_reconciliation.counted_macs},
                       {"exact", report.dense_reconciliation.exact}}},
                 {"pruned",
                  json{{"analytical_macs", report.pruned_reconciliation.analytical_macs},
                       {"counted_macs", report.pruned_reconciliation.counted_macs},
                       {"exact", report.pruned_reconciliation.exact}}}};
    }
    return out.dump(indent);
}

std::string influence_sweep_json(const std::vector<pruner::LayerInfluences>& sweeps,
                                 int indent) {
    json out = json::array();
    for (const auto& sweep : sweeps) {
        json records = json::array();
        for (const auto& r : sweep.records) {
            records.push_back(influence_json(r));
        }
        out.push_back(json{{"layer", sweep.layer}, {"records", std::move(records)}});
    }
    return out.dump(indent);
}

std::string mask_probe_json(const probes::MaskProbeReport& report, int indent) {
    json out;
    out["kind"] = report.kind;
    out["layers"] = report.layers;
    out["masked_positions"] = report.masked_positions;
    out["delta"] = delta_json(report.delta);
    out["degenerate_rows"] = report.degenerate_rows;
    return out.dump(indent);
}

std::string sink_report_json(const probes::SinkReport& report, int indent) {
    json tokens = json::array();
    for (const auto& t : report.tokens) {
        tokens.push_back(json{{"position", t.position},
                              {"last_row_mass", t.last_row_mass},
                              {"value_l1", t.value_l1},
                              {"sink_flag", t.sink_flag}});
    }
    json out;
    out["kind"] = "sink-stats";
    out["layer"] = report.layer;
    out["tokens"] = std::move(tokens);
    out["mass_p90"] = report.mass_p90;
    out["value_l1_median"] = report.value_l1_median;
    out["segment_mass"] = json{{"system", report.system_mass},
                               {"vision", report.vision_mass},
                               {"instruction", report.instruction_mass}};
    return out.dump(indent);
}

std::string lens_json(const probes::LensResult& lens, int indent) {
    json out;
    out["kind"] = "logit-lens";
    out["distribution"] = lens.distribution;
    out["top_ids"] = lens.top_ids;
    return out.dump(indent);
}

std::string vo_projection_json(const probes::VoProjection& vo, std::size_t layer,
                               std::size_t head, int indent) {
    json out;
    out["kind"] = "vo-projection";
    out["layer"] = layer;
    out["head"] = head;
    out["scores"] = vo.scores;
    if (!vo.softmaxed.empty()) {
        out["softmaxed"] = vo.softmaxed;
    }
    out["top_ids"] = vo.top_ids;
    return out.dump(indent);
}

std::string sweep_csv(const std::vector<cost::SweepRow>& rows) {
    std::string out = "n_vision,n_text,middle_layers,retained,attention_reduction,"
                      "visual_flops_reduction,total_flops_reduction\n";
    for (const auto& row : rows) {
        out += std::to_string(row.n_vision) + "," + std::to_string(row.n_text) + "," +
               std::to_string(row.middle_layers) + "," + std::to_string(row.retained) + "," +
               format_double(row.visual_attention_reduction) + "," +
               format_double(row.visual_flops_reduction) + "," +
               format_double(row.total_flops_reduction) + "\n";
    }
    return out;
}

std::string probe_series_csv(const std::vector<probes::MaskProbeReport>& reports) {
    std::string out = "probe,layers,delta_l2,delta_max_abs,argmax_changed\n";
    for (const auto& r : reports) {
        std::string layers;
        for (std::size_t i = 0; i < r.layers.size(); ++i) {
            layers += (i > 0 ? ";" : "") + std::to_string(r.layers[i]);
        }
        out += r.kind + "," + layers + "," + format_double(r.delta.l2) + "," +
               format_double(r.delta.max_abs) + "," + (r.delta.argmax_changed ? "1" : "0") +
               "\n";
    }
    return out;
}

}  // namespace visipruner::report
