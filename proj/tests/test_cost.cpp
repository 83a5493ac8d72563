// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "visipruner/cost.hpp"
#include "visipruner/errors.hpp"
#include "visipruner/fixtures.hpp"
#include "visipruner/rng.hpp"

using namespace visipruner;

namespace {

cost::CostParams toy_params() {
    cost::CostParams p;
    p.num_layers = 6;
    p.hidden_dim = 32;
    p.ffn_dim = 64;
    p.n_vision = 8;
    p.n_text = 6;
    p.vocab_size = 97;
    p.schedule.shallow_layers = 1;
    p.schedule.middle_layers = 3;
    p.schedule.retained = 2;
    p.schedule.filtering_layer = 2;
    p.schedule.exit_layer = 5;
    return p;
}

}  // namespace

TEST_SUITE_BEGIN("cost");

TEST_CASE("an empty model costs nothing") {
    auto p = toy_params();
    p.num_layers = 0;
    p.schedule = {};
    const auto b = cost::paper_dense_breakdown(p);
    CHECK(b.total() == 0);
}

TEST_CASE("llava preset reproduces the headline figures") {
    const auto p = cost::llava7b_preset();
    const auto r = cost::paper_flops(p);

    const double dense = static_cast<double>(r.dense_total);
    CHECK(dense >= 0.85 * 3.82e12);
    CHECK(dense <= 1.15 * 3.82e12);

    CHECK(r.visual_attention_reduction >= 0.98);
    CHECK(r.visual_attention_reduction <= 0.9995);

    CHECK(r.visual_flops_reduction >= 0.628 - 0.03);
    CHECK(r.visual_flops_reduction <= 0.628 + 0.03);

    CHECK(r.total_flops_reduction >= 0.539 - 0.03);
    CHECK(r.total_flops_reduction <= 0.539 + 0.03);
}

TEST_CASE("breakdowns sum to their totals with no residue") {
    const auto r = cost::paper_flops(cost::llava7b_preset());
    CHECK(r.dense.attn_scores + r.dense.attn_projections + r.dense.ffn == r.dense_total);
    CHECK(r.pruned.attn_scores + r.pruned.attn_projections + r.pruned.ffn ==
          r.pruned_total_scores_ffn);
    CHECK(r.pruned_visual + r.dense_text_scores_ffn == r.pruned_total_scores_ffn);

    const auto t = cost::paper_flops(toy_params());
    CHECK(t.dense.total() == t.dense_total);
    CHECK(t.pruned.total() == t.pruned_total_scores_ffn);
}

TEST_CASE("attention reduction formula endpoints") {
    auto p = cost::llava7b_preset();

    auto zero_kept = p;
    zero_kept.schedule.retained = 0;
    CHECK(cost::visual_attention_reduction(zero_kept) == doctest::Approx(1.0).epsilon(1e-12));

    // Spec-anchored variant: fifteen interaction layers.
    auto fifteen = p;
    fifteen.schedule.middle_layers = 15;
    const double r15 = cost::visual_attention_reduction(fifteen);
    CHECK(r15 >= 0.98);
    CHECK(r15 <= 0.9995);

    // Full retention evaluates the raw formula, which undercounts the dense
    // side and goes negative; the report clamps it.
    auto full = p;
    full.schedule.middle_layers = p.num_layers;
    full.schedule.shallow_layers = 0;
    full.schedule.retained = p.n_vision;
    const double d = 4096.0;
    const double nv = 576.0;
    const double nt = 74.0;
    const double expected =
        1.0 - (32.0 * 4.0 * nv * nv * d + 32.0 * nv * nt * d) /
                  (32.0 * 2.0 * (nv * nv * d + nv * nt * d));
    CHECK(cost::visual_attention_reduction(full) == doctest::Approx(expected).epsilon(1e-12));
    const auto report = cost::paper_flops(full);
    CHECK(report.visual_attention_reduction >= 0.0);
    CHECK(report.visual_attention_reduction <= 1.0);
}

TEST_CASE("reductions are monotone in retained tokens and interaction layers") {
    auto p = cost::llava7b_preset();
    double prev = 2.0;
    for (std::size_t kept : {0u, 5u, 10u, 50u, 200u, 576u}) {
        p.schedule.retained = kept;
        const double r = cost::visual_attention_reduction(p);
        CHECK(r <= prev);
        prev = r;
    }
    p = cost::llava7b_preset();
    prev = 2.0;
    for (std::size_t middle : {0u, 4u, 8u, 16u, 24u}) {
        p.schedule.middle_layers = middle;
        const double r = cost::visual_attention_reduction(p);
        CHECK(r <= prev);
        prev = r;
    }
}

TEST_CASE("degenerate vision-free params report zero reductions with a warning") {
    auto p = toy_params();
    p.n_vision = 0;
    p.schedule.retained = 0;
    const auto r = cost::paper_flops(p);
    CHECK(r.visual_flops_reduction == 0.0);
    CHECK(r.total_flops_reduction == 0.0);
    CHECK(!r.notes.empty());
}

TEST_CASE("kv accounting follows the schedule window") {
    const auto preset = cost::llava7b_preset();
    const auto kv = cost::kv_memory(preset);
    const double expected = 1.0 - (15.0 * 10.0) / (32.0 * 576.0);
    CHECK(kv.vision_reduction == doctest::Approx(expected).epsilon(1e-12));
    CHECK(kv.dense_entries ==
          32ull * 650ull * 2ull * 4096ull);

    auto null_schedule = preset;
    null_schedule.schedule.shallow_layers = 0;
    null_schedule.schedule.middle_layers = 32;
    null_schedule.schedule.retained = 576;
    null_schedule.schedule.filtering_layer = 1;
    null_schedule.schedule.exit_layer = 0;  // never exits
    const auto kv_null = cost::kv_memory(null_schedule);
    CHECK(kv_null.total_reduction == 0.0);
    CHECK(kv_null.vision_reduction == 0.0);

    auto no_vision_kept = preset;
    no_vision_kept.schedule.retained = 0;
    const auto kv_none = cost::kv_memory(no_vision_kept);
    CHECK(kv_none.vision_reduction == 1.0);
}

TEST_CASE("vision-length sweeps keep the attention reduction monotone") {
    const auto base = cost::llava7b_preset();
    const std::vector<std::size_t> lengths{64, 128, 256, 512, 1024};
    const auto rows = cost::sweep_vision_lengths(base, lengths);
    REQUIRE(rows.size() == lengths.size());
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i].visual_attention_reduction >= rows[i - 1].visual_attention_reduction);
    }
}

TEST_CASE("mac model reconciles exactly with the instrumented engine") {
    Rng rng(1234);
    for (int trial = 0; trial < 25; ++trial) {
        engine::ModelConfig cfg;
        cfg.num_heads = 1 + rng.next_below(3);
        cfg.hidden_dim = cfg.num_heads * (2 + rng.next_below(5));
        cfg.num_layers = 2 + rng.next_below(4);
        cfg.ffn_dim = 4 + rng.next_below(16);
        cfg.vocab_size = 7 + rng.next_below(20);
        cfg.seed = rng.next_u64();
        const auto model = engine::init_model(cfg);
        Rng srng(rng.next_u64());
        const auto stream = engine::random_stream(cfg, rng.next_below(2), 1 + rng.next_below(6),
                                                  1 + rng.next_below(4), srng);
        const cost::MacModelInput input{cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size,
                                        stream.n_text(), stream.n_vision()};

        kernels::MacCounter dense_counter;
        engine::PrefillOptions dense_options;
        dense_options.counter = &dense_counter;
        auto dense = engine::prefill(model, stream, dense_options);
        const auto dense_model = cost::mac_dense_prefill(input, cfg.num_layers);
        const auto dense_rec = cost::reconcile(dense_model, dense_counter);
        CHECK(dense_rec.exact);
        CHECK(dense_rec.analytical_flops == 2 * dense_rec.analytical_macs);

        pruner::PruneParams params;
        params.theta_cos = trial % 2 == 0 ? 0.995 : 1.0;
        params.theta_l2 = trial % 3 == 0 ? 0.0 : 0.2;
        params.exit_patience = 1 + rng.next_below(2);
        params.merge_enabled = rng.next_unit() < 0.7;
        params.shallow_skip_enabled = rng.next_unit() < 0.7;
        kernels::MacCounter sched_counter;
        pruner::ScheduleRunOptions options;
        options.counter = &sched_counter;
        const auto run = pruner::apply_schedule(model, stream, params, options);
        const auto sched_model = cost::mac_schedule_prefill(input, run.schedule);
        CHECK(cost::reconcile(sched_model, sched_counter).exact);

        // A few decode steps against the pruned cache.
        kernels::MacCounter decode_counter;
        auto cache = run.cache;
        for (int step = 0; step < 3; ++step) {
            std::vector<std::size_t> lens;
            for (const auto& layer : cache.layers) {
                lens.push_back(layer.length() + 1);
            }
            engine::DecodeInput in;
            in.token_id = static_cast<std::uint32_t>(rng.next_below(cfg.vocab_size));
            engine::decode_step(model, cache, in, cache.next_position, &decode_counter);
            const auto step_model = cost::mac_decode_step(input, lens);
            CHECK(cost::reconcile(step_model, decode_counter).exact);
            decode_counter.reset();
        }
    }
}

TEST_CASE("probe overhead is itemized separately") {
    const auto cfg_seed = 77;
    engine::ModelConfig cfg;
    cfg.num_layers = 5;
    cfg.hidden_dim = 24;
    cfg.num_heads = 4;
    cfg.ffn_dim = 32;
    cfg.vocab_size = 13;
    cfg.seed = cfg_seed;
    const auto model = engine::init_model(cfg);
    Rng rng(cfg_seed);
    const auto stream = engine::random_stream(cfg, 1, 4, 3, rng);
    pruner::PruneParams params;
    const auto run = pruner::apply_schedule(model, stream, params);
    const cost::MacModelInput input{cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size,
                                    stream.n_text(), stream.n_vision()};
    const auto b = cost::mac_schedule_prefill(input, run.schedule);
    CHECK(b.probe_overhead > 0);
    CHECK(b.total() ==
          b.attn_projections + b.attn_scores + b.ffn + b.probe_overhead + b.unembed);
}

TEST_CASE("an empty run reconciles to zero against a fresh counter") {
    kernels::MacCounter counter;
    const cost::MacBreakdown empty;
    const auto r = cost::reconcile(empty, counter);
    CHECK(r.exact);
    CHECK(r.analytical_macs == 0);
    CHECK(r.counted_macs == 0);
    CHECK(r.analytical_flops == 0);
}

TEST_CASE("invalid cost params are rejected") {
    auto p = toy_params();
    p.schedule.retained = p.n_vision + 1;
    CHECK_THROWS_AS(cost::kv_memory(p), InputError);

    auto q = toy_params();
    q.schedule.shallow_layers = 5;
    q.schedule.middle_layers = 5;
    CHECK_THROWS_AS(cost::paper_flops(q), InputError);
}

TEST_SUITE_END();
