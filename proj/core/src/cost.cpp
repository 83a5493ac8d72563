// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include "visipruner/cost.hpp"

#include <algorithm>

#include "visipruner/errors.hpp"

namespace visipruner::cost {

namespace {

using u64 = std::uint64_t;

double ratio_reduction(u64 pruned, u64 dense) {
    if (dense == 0) {
        return 0.0;
    }
    return 1.0 - static_cast<double>(pruned) / static_cast<double>(dense);
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

void CostParams::validate() const {
    if (hidden_dim < 1 || ffn_dim < 1) {
        throw InputError("CostParams: width counts must be >= 1");
    }
    // num_layers == 0 is the legal empty model: every total is zero.
    if (schedule.shallow_layers + schedule.middle_layers > num_layers) {
        throw InputError("CostParams: shallow + middle layers exceed the model depth");
    }
    if (schedule.retained > n_vision) {
        throw InputError("CostParams: retained tokens exceed the vision segment");
    }
}

CostParams llava7b_preset() {
    CostParams p;
    p.num_layers = 32;
    p.hidden_dim = 4096;
    p.ffn_dim = 11008;
    p.n_vision = 576;
    p.n_text = 74;
    p.vocab_size = 0;
    p.schedule.shallow_layers = 8;
    p.schedule.middle_layers = 16;
    p.schedule.retained = 10;
    p.schedule.filtering_layer = 9;
    p.schedule.exit_layer = 24;
    return p;
}

KvReport kv_memory(const CostParams& params) {
    params.validate();
    const u64 d = params.hidden_dim;
    const u64 L = params.num_layers;
    const u64 per_position = 2 * d;  // one key row and one value row

    KvReport kv;
    kv.dense_entries = L * static_cast<u64>(params.n_total()) * per_position;
    kv.vision_dense_entries = L * static_cast<u64>(params.n_vision) * per_position;

    u64 vision_layers = 0;
    if (params.schedule.filtering_layer >= 1 && params.schedule.filtering_layer <= L) {
        const u64 end = params.schedule.exit_layer >= 1 ? params.schedule.exit_layer : L + 1;
        if (end > params.schedule.filtering_layer) {
            vision_layers = end - params.schedule.filtering_layer;
        }
    }
    kv.vision_pruned_entries =
        vision_layers * static_cast<u64>(params.schedule.retained) * per_position;
    kv.pruned_entries =
        L * static_cast<u64>(params.n_text) * per_position + kv.vision_pruned_entries;
    kv.total_reduction = clamp01(ratio_reduction(kv.pruned_entries, kv.dense_entries));
    kv.vision_reduction =
        clamp01(ratio_reduction(kv.vision_pruned_entries, kv.vision_dense_entries));
    return kv;
}

PaperBreakdown paper_dense_breakdown(const CostParams& params) {
    params.validate();
    const u64 L = params.num_layers;
    const u64 d = params.hidden_dim;
    const u64 m = params.ffn_dim;
    const u64 n = params.n_total();
    PaperBreakdown b;
    b.attn_scores = L * 2 * n * n * d;
    b.attn_projections = L * 4 * n * d * d;
    b.ffn = L * 3 * n * d * m;
    return b;
}

double visual_attention_reduction(const CostParams& params) {
    params.validate();
    const double d = static_cast<double>(params.hidden_dim);
    const double L = static_cast<double>(params.num_layers);
    const double lp = static_cast<double>(params.schedule.middle_layers);
    const double nv = static_cast<double>(params.n_vision);
    const double nvp = static_cast<double>(params.schedule.retained);
    const double nt = static_cast<double>(params.n_text);
    const double numerator = lp * 4.0 * nvp * nvp * d + lp * nvp * nt * d;
    const double denominator = L * 2.0 * (nv * nv * d + nv * nt * d);
    if (denominator == 0.0) {
        return 0.0;
    }
    return 1.0 - numerator / denominator;
}

PaperFlopsReport paper_flops(const CostParams& params) {
    params.validate();
    const u64 L = params.num_layers;
    const u64 d = params.hidden_dim;
    const u64 m = params.ffn_dim;
    const u64 nv = params.n_vision;
    const u64 nt = params.n_text;
    const u64 nvp = params.schedule.retained;
    const u64 shallow = params.schedule.shallow_layers;
    const u64 middle = params.schedule.middle_layers;

    PaperFlopsReport report;
    report.dense = paper_dense_breakdown(params);
    report.dense_total = report.dense.total();

    if (nv == 0) {
        report.notes.push_back("degenerate: no vision tokens, reductions defined as 0");
        report.dense_text_scores_ffn = L * (2 * nt * nt * d + 3 * nt * d * m);
        report.pruned.attn_scores = L * 2 * nt * nt * d;
        report.pruned.ffn = L * 3 * nt * d * m;
        report.pruned_total_scores_ffn = report.dense_text_scores_ffn;
        report.kv = kv_memory(params);
        return report;
    }

    // Reduction baselines track attention scores and FFN, the two terms the
    // source formulas carry; the visual share of the scores counts the
    // vision-vision block plus one vision-text cross block.
    report.dense_visual_scores_ffn = L * (2 * (nv * nv + nv * nt) * d + 3 * nv * d * m);
    report.dense_text_scores_ffn = L * (2 * (nt * nt + nv * nt) * d + 3 * nt * d * m);

    // Shallow layers keep vision projections and FFN but no vision attention;
    // middle layers run the retained set end to end.
    const u64 shallow_visual = shallow * (4 * nv * d * d + 3 * nv * d * m);
    const u64 middle_visual = middle * (4 * nvp * d * d + 2 * nvp * nvp * d + 3 * nvp * d * m);
    report.pruned_visual = shallow_visual + middle_visual;

    report.pruned.attn_projections = shallow * 4 * nv * d * d + middle * 4 * nvp * d * d;
    report.pruned.attn_scores =
        middle * 2 * nvp * nvp * d + L * 2 * (nt * nt + nv * nt) * d;
    report.pruned.ffn = shallow * 3 * nv * d * m + middle * 3 * nvp * d * m + L * 3 * nt * d * m;
    report.pruned_total_scores_ffn = report.pruned_visual + report.dense_text_scores_ffn;

    report.visual_attention_reduction_raw = visual_attention_reduction(params);
    report.visual_attention_reduction = clamp01(report.visual_attention_reduction_raw);
    report.visual_flops_reduction_raw =
        ratio_reduction(report.pruned_visual, report.dense_visual_scores_ffn);
    report.visual_flops_reduction = clamp01(report.visual_flops_reduction_raw);
    report.total_flops_reduction_raw =
        ratio_reduction(report.pruned_total_scores_ffn,
                        report.dense_visual_scores_ffn + report.dense_text_scores_ffn);
    report.total_flops_reduction = clamp01(report.total_flops_reduction_raw);

    if (report.visual_attention_reduction_raw != report.visual_attention_reduction ||
        report.visual_flops_reduction_raw != report.visual_flops_reduction ||
        report.total_flops_reduction_raw != report.total_flops_reduction) {
        report.notes.push_back("a raw reduction left [0, 1] and was clamped; the convention "
                               "only models savings at pruning scale");
    }
    report.notes.push_back("dense_total counts scores+projections+FFN; reduction ratios follow "
                           "the scores+FFN convention of the source formulas, whose pruned "
                           "visual tally still carries projection terms");
    report.notes.push_back("the vision-text cross term in the attention baseline is restored "
                           "to d-scaled form");
    report.kv = kv_memory(params);
    return report;
}

std::vector<SweepRow> sweep_vision_lengths(const CostParams& base,
                                           const std::vector<std::size_t>& vision_lengths) {
    std::vector<SweepRow> rows;
    rows.reserve(vision_lengths.size());
    for (std::size_t nv : vision_lengths) {
        CostParams p = base;
        p.n_vision = nv;
        p.schedule.retained = std::min(p.schedule.retained, nv);
        const auto report = paper_flops(p);
        SweepRow row;
        row.n_vision = nv;
        row.n_text = p.n_text;
        row.middle_layers = p.schedule.middle_layers;
        row.retained = p.schedule.retained;
        row.visual_attention_reduction = report.visual_attention_reduction;
        row.visual_flops_reduction = report.visual_flops_reduction;
        row.total_flops_reduction = report.total_flops_reduction;
        rows.push_back(row);
    }
    return rows;
}

namespace {

struct MacTerms {
    const MacModelInput& in;
    u64 d() const { return in.hidden_dim; }
    u64 m() const { return in.ffn_dim; }

    void dense_layer(MacBreakdown& b, u64 len) const {
        b.attn_projections += 4 * len * d() * d();
        b.attn_scores += 2 * len * len * d();
        b.ffn += 3 * len * d() * m();
    }
    void skip_layer(MacBreakdown& b, u64 text, u64 seq) const {
        b.attn_projections += 4 * text * d() * d();
        b.attn_scores += 2 * text * text * d();
        b.ffn += 3 * seq * d() * m();
    }
    void probe(MacBreakdown& b, u64 len) const {
        b.probe_overhead += d() * d() + 2 * len * d() * d() + 2 * len * d();
    }
};

}  // namespace

MacBreakdown mac_dense_prefill(const MacModelInput& input, std::size_t num_layers) {
    MacBreakdown b;
    MacTerms terms{input};
    const u64 n = input.n_text + input.n_vision;
    for (std::size_t l = 0; l < num_layers; ++l) {
        terms.dense_layer(b, n);
    }
    b.unembed = static_cast<u64>(input.vocab_size) * input.hidden_dim;
    return b;
}

MacBreakdown mac_schedule_prefill(const MacModelInput& input,
                                  const pruner::PruneSchedule& schedule) {
    MacBreakdown b;
    MacTerms terms{input};
    const u64 text = input.n_text;
    const u64 full = input.n_text + input.n_vision;
    const u64 sparse = input.n_text + schedule.retained.size();

    const auto probed = [&](std::size_t layer) {
        return std::find(schedule.probed_layers.begin(), schedule.probed_layers.end(), layer) !=
               schedule.probed_layers.end();
    };

    u64 len = full;
    for (std::size_t layer = 1; layer <= schedule.modes.size(); ++layer) {
        const bool is_filter = schedule.filtering_layer.has_value() &&
                               *schedule.filtering_layer == layer;
        if (probed(layer)) {
            terms.probe(b, len);  // the side channel sees the pre-drop sequence
        }
        switch (schedule.modes[layer - 1]) {
            case pruner::LayerMode::kMerge:
            case pruner::LayerMode::kDense:
                terms.dense_layer(b, len);
                break;
            case pruner::LayerMode::kSkip:
                terms.skip_layer(b, text, len);
                break;
            case pruner::LayerMode::kDenseProbe:
                if (schedule.fallback_dense) {
                    // First pass (skipped or dense), then the dense restart.
                    if (schedule.params.shallow_skip_enabled) {
                        terms.skip_layer(b, text, len);
                    } else {
                        terms.dense_layer(b, len);
                    }
                    terms.dense_layer(b, len);
                } else {
                    terms.dense_layer(b, len);
                }
                break;
            case pruner::LayerMode::kSparse:
                if (is_filter) {
                    len = sparse;
                }
                terms.dense_layer(b, len);
                break;
            case pruner::LayerMode::kVisionFree:
                len = text;
                terms.dense_layer(b, len);
                break;
        }
    }
    b.unembed = static_cast<u64>(input.vocab_size) * input.hidden_dim;
    return b;
}

MacBreakdown mac_decode_step(const MacModelInput& input,
                             const std::vector<std::size_t>& cache_len_after_append) {
    MacBreakdown b;
    const u64 d = input.hidden_dim;
    for (std::size_t len : cache_len_after_append) {
        b.attn_projections += 4 * d * d;  // q, k, v, o for the single row
        b.attn_scores += 2 * static_cast<u64>(len) * d;
        b.ffn += 3 * d * input.ffn_dim;
    }
    b.unembed = static_cast<u64>(input.vocab_size) * d;
    return b;
}

Reconciliation reconcile(const MacBreakdown& analytical, const kernels::MacCounter& counter) {
    Reconciliation r;
    r.analytical_macs = analytical.total();
    r.counted_macs = counter.count();
    r.analytical_flops = 2 * r.analytical_macs;
    r.exact = r.analytical_macs == r.counted_macs;
    return r;
}

}  // namespace visipruner::cost
