// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "visipruner/errors.hpp"
#include "visipruner/fixtures.hpp"
#include "visipruner/pruner.hpp"
#include "visipruner/rng.hpp"

using namespace visipruner;
using engine::Modality;
using fixtures::FixtureKind;
using pruner::InfluenceRecord;
using pruner::LayerInfluences;

namespace {

engine::ModelConfig fixture_config(std::uint64_t seed) {
    engine::ModelConfig cfg;
    cfg.num_layers = 6;
    cfg.hidden_dim = 32;
    cfg.num_heads = 4;
    cfg.ffn_dim = 64;
    cfg.vocab_size = 97;
    cfg.seed = seed;
    return cfg;
}

// Canonical row mass reading: the vision block first, then the rest in row
// order. Merging keeps this total bit-identical.
double block_row_mass(std::span<const double> w, std::span<const Modality> mods) {
    double acc = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
        if (mods[j] == Modality::kVision) {
            acc += w[j];
        }
    }
    for (std::size_t j = 0; j < w.size(); ++j) {
        if (mods[j] != Modality::kVision) {
            acc += w[j];
        }
    }
    return acc;
}

std::vector<double> random_softmax_row(std::size_t n, Rng& rng) {
    std::vector<double> w(n);
    double total = 0.0;
    for (auto& x : w) {
        x = rng.next_unit() < 0.15 ? 0.0 : rng.next_unit();
        total += x;
    }
    if (total == 0.0) {
        w[0] = 1.0;
        total = 1.0;
    }
    for (auto& x : w) {
        x /= total;
    }
    return w;
}

}  // namespace

TEST_SUITE_BEGIN("pruner");

TEST_CASE("merge_row collapses the vision block onto the target") {
    std::vector<double> w{0.2, 0.3, 0.5};
    const std::vector<std::size_t> pos{0, 1, 2};
    const std::vector<Modality> mods{Modality::kVision, Modality::kVision,
                                     Modality::kInstruction};
    pruner::merge_row(w, pos, mods, 0);
    CHECK(w[0] == 0.5);
    CHECK(w[1] == 0.0);
    CHECK(w[2] == 0.5);
}

TEST_CASE("merge_row leaves a zero-mass vision block unchanged") {
    std::vector<double> w{0.6, 0.0, 0.0, 0.4};
    const std::vector<std::size_t> pos{0, 1, 2, 3};
    const std::vector<Modality> mods{Modality::kSystem, Modality::kVision, Modality::kVision,
                                     Modality::kInstruction};
    const auto before = w;
    pruner::merge_row(w, pos, mods, 1);
    CHECK(w == before);
}

TEST_CASE("merge_row rejects targets outside the vision range") {
    std::vector<double> w{0.5, 0.5};
    const std::vector<std::size_t> pos{0, 1};
    const std::vector<Modality> mods{Modality::kVision, Modality::kInstruction};
    CHECK_THROWS_AS(pruner::merge_row(w, pos, mods, 1), InputError);
}

TEST_CASE("merge conserves mass exactly and never touches non-vision entries") {
    Rng rng(404);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 3 + rng.next_below(10);
        const std::size_t v0 = rng.next_below(n - 1);
        const std::size_t v1 = v0 + 1 + rng.next_below(n - v0 - 1);
        std::vector<std::size_t> pos(n);
        std::vector<Modality> mods(n);
        for (std::size_t j = 0; j < n; ++j) {
            pos[j] = j;
            mods[j] = (j >= v0 && j < v1) ? Modality::kVision
                      : j < v0            ? Modality::kSystem
                                          : Modality::kInstruction;
        }
        const std::size_t target = v0 + rng.next_below(v1 - v0);
        auto w = random_softmax_row(n, rng);
        const auto before = w;
        pruner::merge_row(w, pos, mods, target);

        CHECK(block_row_mass(w, mods) == block_row_mass(before, mods));
        for (std::size_t j = 0; j < n; ++j) {
            if (mods[j] != Modality::kVision) {
                CHECK(w[j] == before[j]);
            } else if (j != target) {
                CHECK(w[j] == 0.0);
            }
        }
    }
}

TEST_CASE("influence of a zero-weight token is the identity") {
    const auto cfg = fixture_config(9);
    const auto fix = fixtures::build_fixture(FixtureKind::kVisionDeadAfter, cfg);
    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto run = engine::prefill(fix.model, fix.stream, options);
    // Beyond the dead layer every text-to-vision weight is exactly zero.
    const auto& trace = run.traces[cfg.num_layers - 1];
    const auto records = pruner::layer_influences(trace);
    for (const auto& r : records) {
        CHECK(r.attention_mass == 0.0);
        CHECK(r.l2 == 0.0);
        CHECK(r.cosine >= 1.0 - 1e-12);
    }
}

TEST_CASE("influence of a total-mass token follows the zero-norm convention") {
    // Hand-built single-head trace: the whole row sits on column 0.
    engine::LayerTrace trace;
    trace.layer = 1;
    trace.row_positions = {0, 1};
    trace.row_modalities = {Modality::kVision, Modality::kInstruction};
    trace.col_positions = {0, 1};
    trace.col_modalities = {Modality::kVision, Modality::kInstruction};
    trace.weights.emplace_back(2, 2);
    trace.weights[0].at(1, 0) = 1.0;
    trace.values.emplace_back(2, 3);
    trace.values[0].at(0, 0) = 3.0;
    trace.values[0].at(0, 1) = 0.0;
    trace.values[0].at(0, 2) = 4.0;
    trace.attn_output = kernels::RealMatrix(2, 3);
    trace.attn_output.at(1, 0) = 3.0;
    trace.attn_output.at(1, 2) = 4.0;

    const auto rec = pruner::influence_of_token(trace, 1, 0);
    CHECK(rec.cosine == 0.0);
    CHECK(rec.l2 == 5.0);
    CHECK(rec.attention_mass == 1.0);

    CHECK_THROWS_AS(pruner::influence_of_token(trace, 0, 1), CausalityError);
}

TEST_CASE("influence matches a full from-scratch recomputation") {
    Rng rng(2025);
    for (int trial = 0; trial < 40; ++trial) {
        engine::ModelConfig cfg;
        cfg.num_heads = 1 + rng.next_below(4);
        cfg.hidden_dim = cfg.num_heads * (2 + rng.next_below(4));
        cfg.num_layers = 1 + rng.next_below(3);
        cfg.ffn_dim = 8 + rng.next_below(16);
        cfg.vocab_size = 11;
        cfg.seed = rng.next_u64();
        const auto model = engine::init_model(cfg);
        Rng srng(rng.next_u64());
        const auto stream = engine::random_stream(cfg, rng.next_below(2), 2 + rng.next_below(5),
                                                  1 + rng.next_below(4), srng);
        engine::PrefillOptions options;
        options.capture_traces = true;
        const auto run = engine::prefill(model, stream, options);
        const auto& trace = run.traces[rng.next_below(cfg.num_layers)];

        const std::size_t last = trace.row_positions.back();
        const std::size_t i = trace.row_positions.size() - 1;
        for (std::size_t j = 0; j < trace.col_positions.size(); ++j) {
            if (trace.col_positions[j] > last) {
                continue;
            }
            const auto rec = pruner::influence_of_token(trace, last, trace.col_positions[j]);

            // Oracle: rebuild the masked output from the whole weight row.
            const std::size_t dk = cfg.head_dim();
            std::vector<double> masked(cfg.hidden_dim, 0.0);
            for (std::size_t h = 0; h < cfg.num_heads; ++h) {
                for (std::size_t c = 0; c < trace.col_positions.size(); ++c) {
                    if (c == j) {
                        continue;  // the zeroed entry, no renormalization
                    }
                    const double w = trace.weights[h].at(i, c);
                    for (std::size_t t = 0; t < dk; ++t) {
                        masked[h * dk + t] += w * trace.values[h].at(c, t);
                    }
                }
            }
            const auto cl = kernels::cosine_and_l2(trace.attn_output.row(i), masked);
            CHECK(std::fabs(rec.cosine - cl.cosine) <= 1e-12);
            CHECK(std::fabs(rec.l2 - cl.l2) <= 1e-12);
        }
    }
}

TEST_CASE("probe side channel reproduces the dense trace reading") {
    const auto cfg = fixture_config(77);
    const auto model = engine::init_model(cfg);
    Rng rng(5);
    const auto stream = engine::random_stream(cfg, 2, 5, 3, rng);
    pruner::PruneParams params;
    for (std::size_t layer = 2; layer <= cfg.num_layers; ++layer) {
        const auto via_probe = pruner::probe_layer_influences(model, stream, layer, params);
        const auto sweeps = pruner::influence_sweep(model, stream, layer, layer);
        REQUIRE(via_probe.size() == sweeps[0].records.size());
        for (std::size_t j = 0; j < via_probe.size(); ++j) {
            CHECK(via_probe[j].cosine == sweeps[0].records[j].cosine);
            CHECK(via_probe[j].l2 == sweeps[0].records[j].l2);
            CHECK(via_probe[j].attention_mass == sweeps[0].records[j].attention_mass);
        }
    }
    CHECK_THROWS_AS(pruner::probe_layer_influences(model, stream, 1, params), InputError);
}

TEST_CASE("uniform fixture yields exactly equal influences") {
    const auto cfg = fixture_config(6);
    const auto fix = fixtures::build_fixture(FixtureKind::kUniform, cfg);
    pruner::PruneParams params;
    const auto records = pruner::probe_layer_influences(fix.model, fix.stream, 2, params);
    REQUIRE(!records.empty());
    for (const auto& r : records) {
        CHECK(std::fabs(r.l2 - records[0].l2) <= 1e-9);
    }
}

TEST_CASE("filtering detection picks the first sub-threshold layer") {
    pruner::PruneParams params;  // theta_cos = 0.995
    auto sweep_with = [](std::size_t layer, double min_cos) {
        LayerInfluences s;
        s.layer = layer;
        s.records.push_back({layer, 3, min_cos, 0.1, 0.2});
        s.records.push_back({layer, 4, min_cos + 0.001, 0.05, 0.1});
        return s;
    };
    const std::vector<LayerInfluences> sweeps{
        sweep_with(2, 0.999), sweep_with(3, 0.997), sweep_with(4, 0.990),
        sweep_with(5, 0.950)};
    const auto lf = pruner::detect_filtering_layer(sweeps, params);
    REQUIRE(lf.has_value());
    CHECK(*lf == 4);

    const std::vector<LayerInfluences> calm{sweep_with(2, 1.0), sweep_with(3, 1.0)};
    CHECK_FALSE(pruner::detect_filtering_layer(calm, params).has_value());

    const auto cfg = fixture_config(15);
    const auto fix = fixtures::build_fixture(FixtureKind::kCriticalToken, cfg);
    const auto real = pruner::influence_sweep(fix.model, fix.stream, 2, cfg.num_layers);
    const auto detected = pruner::detect_filtering_layer(real, params);
    REQUIRE(detected.has_value());
    CHECK(*detected == fix.facts.designated_layer);
}

TEST_CASE("value-aware selection applies the l2 threshold with a fallback") {
    pruner::PruneParams params;  // theta_l2 = 0.2
    std::vector<InfluenceRecord> records{
        {5, 10, 0.9, 0.5, 0.1},
        {5, 11, 0.9, 0.19, 0.1},
        {5, 12, 0.9, 0.21, 0.1},
        {5, 13, 0.9, 0.0, 0.1},
    };
    bool fallback = true;
    const auto kept = pruner::select_retained(records, params, &fallback);
    CHECK(kept == std::vector<std::size_t>{10, 12});
    CHECK_FALSE(fallback);

    for (auto& r : records) {
        r.l2 = 0.0;
    }
    const auto degenerate = pruner::select_retained(records, params, &fallback);
    CHECK(degenerate == std::vector<std::size_t>{10});
    CHECK(fallback);
}

TEST_CASE("attention baselines pick top-k columns with positional tie-breaks") {
    const auto cfg = fixture_config(8);
    const auto uniform = fixtures::build_fixture(FixtureKind::kUniform, cfg);
    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto run = engine::prefill(uniform.model, uniform.stream, options);
    const auto& t1 = run.traces[0];

    const auto vision = uniform.stream.positions_of(Modality::kVision);
    const auto all = pruner::select_baseline(t1, pruner::Selector::kAttnLast, vision.size());
    CHECK(all == vision);

    const auto three = pruner::select_baseline(t1, pruner::Selector::kAttnLast, 3);
    CHECK(three == std::vector<std::size_t>{vision[0], vision[1], vision[2]});

    CHECK_THROWS_AS(pruner::select_baseline(t1, pruner::Selector::kAttnLast, vision.size() + 1),
                    InputError);
    CHECK_THROWS_AS(pruner::select_baseline(t1, pruner::Selector::kValueAware, 1), InputError);

    const auto sink = fixtures::build_fixture(FixtureKind::kEngineeredSink, cfg);
    const auto sink_run = engine::prefill(sink.model, sink.stream, options);
    const auto picked =
        pruner::select_baseline(sink_run.traces[0], pruner::Selector::kAttnLast, 1);
    CHECK(picked == std::vector<std::size_t>{sink.facts.designated_position});

    // Instruction rows are equally captured by the sink at layer 1, while
    // vision rows park on the system segment and leave exact zero masses
    // (so attn-vis falls back to the positional tie-break).
    const auto by_text =
        pruner::select_baseline(sink_run.traces[0], pruner::Selector::kAttnText, 1);
    CHECK(by_text == std::vector<std::size_t>{sink.facts.designated_position});
    const auto sink_vision = sink.stream.positions_of(Modality::kVision);
    const auto by_vis =
        pruner::select_baseline(sink_run.traces[0], pruner::Selector::kAttnVis, 2);
    CHECK(by_vis == std::vector<std::size_t>{sink_vision[0], sink_vision[1]});
}

TEST_CASE("exit detection needs a full patience run") {
    pruner::PruneParams params;  // patience 2, theta_cos 0.995, theta_l2 0.2
    auto layer_with = [](std::size_t layer, bool impact) {
        LayerInfluences s;
        s.layer = layer;
        s.records.push_back({layer, 3, impact ? 0.5 : 1.0, impact ? 1.0 : 0.0, 0.1});
        return s;
    };
    const std::vector<LayerInfluences> pattern{
        layer_with(5, true), layer_with(6, false), layer_with(7, false), layer_with(8, true)};
    const auto exit = pruner::detect_exit_layer(pattern, params);
    REQUIRE(exit.has_value());
    CHECK(*exit == 7);  // ell_f + 2

    const std::vector<LayerInfluences> alternating{
        layer_with(5, false), layer_with(6, true), layer_with(7, false), layer_with(8, true)};
    CHECK_FALSE(pruner::detect_exit_layer(alternating, params).has_value());

    // Longer patience needs a longer quiet run.
    pruner::PruneParams patient;
    patient.exit_patience = 3;
    const std::vector<LayerInfluences> quiet{layer_with(4, true),  layer_with(5, false),
                                             layer_with(6, false), layer_with(7, false),
                                             layer_with(8, false)};
    const auto late = pruner::detect_exit_layer(quiet, patient);
    REQUIRE(late.has_value());
    CHECK(*late == 7);
    const std::vector<LayerInfluences> too_short{layer_with(4, false), layer_with(5, false),
                                                 layer_with(6, true), layer_with(7, false)};
    CHECK_FALSE(pruner::detect_exit_layer(too_short, patient).has_value());

    const auto cfg = fixture_config(99);
    const auto fix = fixtures::build_fixture(FixtureKind::kVisionDeadAfter, cfg);
    auto sweeps = pruner::influence_sweep(fix.model, fix.stream, 2, cfg.num_layers);
    // Track only the designated (retained) token from the filtering layer on.
    for (auto& s : sweeps) {
        std::vector<InfluenceRecord> kept;
        for (const auto& r : s.records) {
            if (r.token_position == fix.facts.designated_position) {
                kept.push_back(r);
            }
        }
        s.records = std::move(kept);
    }
    const auto detected = pruner::detect_exit_layer(sweeps, params);
    REQUIRE(detected.has_value());
    CHECK(*detected == fix.facts.designated_layer + params.exit_patience);
}

TEST_CASE("value-aware ranking is invariant under positive value rescaling") {
    const auto cfg = fixture_config(14);
    const auto model = engine::init_model(cfg);
    Rng rng(15);
    const auto stream = engine::random_stream(cfg, 1, 6, 3, rng);
    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto run = engine::prefill(model, stream, options);

    for (const double c : {0.5, 2.0, 7.25}) {
        auto trace = run.traces[2];
        for (auto& v : trace.values) {
            for (auto& x : v.data) {
                x *= c;
            }
        }
        // The attention output scales with the values.
        for (auto& x : trace.attn_output.data) {
            x *= c;
        }
        const auto base = pruner::layer_influences(run.traces[2]);
        const auto scaled = pruner::layer_influences(trace);
        REQUIRE(base.size() == scaled.size());

        auto ranking = [](const std::vector<pruner::InfluenceRecord>& records) {
            std::vector<std::size_t> order(records.size());
            for (std::size_t i = 0; i < order.size(); ++i) {
                order[i] = i;
            }
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                if (records[a].l2 != records[b].l2) {
                    return records[a].l2 > records[b].l2;
                }
                return records[a].token_position < records[b].token_position;
            });
            return order;
        };
        CHECK(ranking(base) == ranking(scaled));
        // The l2 values themselves scale by c, so threshold membership moves.
        for (std::size_t i = 0; i < base.size(); ++i) {
            CHECK(scaled[i].l2 == doctest::Approx(base[i].l2 * c).epsilon(1e-9));
        }
    }
}

TEST_CASE("apply_schedule matches the dense run on vision-dead fixtures") {
    const auto cfg = fixture_config(123);
    const auto fix = fixtures::build_fixture(FixtureKind::kVisionDeadAfter, cfg);
    const auto dense = engine::prefill(fix.model, fix.stream);

    pruner::PruneParams params;
    const auto run = pruner::apply_schedule(fix.model, fix.stream, params);
    REQUIRE(run.schedule.filtering_layer.has_value());
    CHECK(*run.schedule.filtering_layer == fix.facts.expected_filtering_layer);
    REQUIRE(run.schedule.exit_layer.has_value());
    CHECK(*run.schedule.exit_layer == fix.facts.expected_exit_layer);
    CHECK(run.schedule.retained == std::vector<std::size_t>{fix.facts.designated_position});

    double max_abs = 0.0;
    for (std::size_t i = 0; i < dense.logits.size(); ++i) {
        max_abs = std::max(max_abs, std::fabs(dense.logits[i] - run.logits[i]));
    }
    CHECK(max_abs <= 1e-5);

    // Modes must march merge -> skip/probe -> sparse -> vision-free.
    run.schedule.validate();
    CHECK(run.schedule.modes[0] == pruner::LayerMode::kMerge);
    for (std::size_t l = *run.schedule.filtering_layer; l < *run.schedule.exit_layer; ++l) {
        CHECK(run.schedule.modes[l - 1] == pruner::LayerMode::kSparse);
    }
    for (std::size_t l = *run.schedule.exit_layer; l <= cfg.num_layers; ++l) {
        CHECK(run.schedule.modes[l - 1] == pruner::LayerMode::kVisionFree);
    }

    // Shallow KV keeps no vision; sparse layers keep exactly the retained one.
    CHECK(run.cache.layers[0].entries.size() == fix.stream.n_text());
    const auto& sparse_layer = run.cache.layers[*run.schedule.filtering_layer - 1];
    std::size_t vision_rows = 0;
    for (const auto& e : sparse_layer.entries) {
        vision_rows += e.modality == Modality::kVision ? 1 : 0;
    }
    CHECK(vision_rows == 1);
}

TEST_CASE("identical inputs produce identical schedules including tie-breaks") {
    const auto cfg = fixture_config(202);
    const auto model = engine::init_model(cfg);
    Rng rng(203);
    const auto stream = engine::random_stream(cfg, 1, 6, 3, rng);
    pruner::PruneParams params;
    params.theta_cos = 1.0;  // fires immediately, exercising selection ties
    params.theta_l2 = 0.0;
    const auto a = pruner::apply_schedule(model, stream, params);
    const auto b = pruner::apply_schedule(model, stream, params);
    CHECK(a.logits == b.logits);
    CHECK(a.schedule.retained == b.schedule.retained);
    CHECK(a.schedule.modes == b.schedule.modes);
    CHECK(a.schedule.filtering_layer == b.schedule.filtering_layer);
    CHECK(a.schedule.exit_layer == b.schedule.exit_layer);
}

TEST_CASE("a null schedule reproduces the dense run bit-exactly") {
    const auto cfg = fixture_config(31);
    const auto model = engine::init_model(cfg);
    Rng rng(77);
    const auto stream = engine::random_stream(cfg, 1, 4, 3, rng);
    const auto dense = engine::prefill(model, stream);

    pruner::PruneParams params;
    params.merge_enabled = false;
    params.shallow_skip_enabled = false;
    params.detection_enabled = false;
    const auto run = pruner::apply_schedule(model, stream, params);
    CHECK(run.logits == dense.logits);
    for (const auto mode : run.schedule.modes) {
        CHECK(mode == pruner::LayerMode::kDense);
    }
    CHECK_FALSE(run.schedule.fallback_dense);
}

TEST_CASE("disabled thresholds reduce the schedule to merge plus shallow skip") {
    const auto cfg = fixture_config(41);
    const auto model = engine::init_model(cfg);
    Rng rng(41);
    const auto stream = engine::random_stream(cfg, 1, 5, 3, rng);

    pruner::PruneParams params;
    params.theta_cos = 1.0;  // fires at the first probed layer
    params.theta_l2 = 0.0;   // keeps every vision token
    const auto run = pruner::apply_schedule(model, stream, params);
    REQUIRE(run.schedule.filtering_layer.has_value());
    CHECK(*run.schedule.filtering_layer == params.probe_start_layer);
    CHECK(run.schedule.retained == stream.positions_of(Modality::kVision));
    CHECK_FALSE(run.schedule.exit_layer.has_value());
}

TEST_CASE("undetected filtering falls back to a dense restart") {
    const auto cfg = fixture_config(52);
    const auto fix = fixtures::build_fixture(FixtureKind::kEngineeredSink, cfg);
    // The sink lives at layer 1 only, so nothing ever crosses the cosine
    // threshold in the probed layers.
    pruner::PruneParams params;
    params.merge_enabled = false;
    params.shallow_skip_enabled = false;
    const auto run = pruner::apply_schedule(fix.model, fix.stream, params);
    CHECK(run.schedule.fallback_dense);
    CHECK_FALSE(run.schedule.filtering_layer.has_value());
    for (std::size_t l = params.probe_start_layer; l <= cfg.num_layers; ++l) {
        CHECK(run.schedule.modes[l - 1] == pruner::LayerMode::kDenseProbe);
    }
    // With merge and skip off the fallback path is a dense run end to end.
    const auto dense = engine::prefill(fix.model, fix.stream);
    CHECK(run.logits == dense.logits);
}

TEST_CASE("evict_vision_kv removes exactly the requested layers") {
    const auto cfg = fixture_config(61);
    const auto model = engine::init_model(cfg);
    Rng rng(16);
    const auto stream = engine::random_stream(cfg, 1, 4, 2, rng);
    auto run = engine::prefill(model, stream);

    const auto untouched = pruner::evict_vision_kv(run.cache, {});
    CHECK(untouched.layers[0].entries.size() == stream.size());

    const auto evicted = pruner::evict_vision_kv(run.cache, {1, 3});
    CHECK(evicted.layers[0].entries.size() == stream.n_text());
    CHECK(evicted.layers[1].entries.size() == stream.size());
    CHECK(evicted.layers[2].entries.size() == stream.n_text());
    for (const auto& e : evicted.layers[0].entries) {
        CHECK(e.modality != Modality::kVision);
    }
    CHECK_THROWS_AS(pruner::evict_vision_kv(run.cache, {cfg.num_layers + 1}), InputError);
}

TEST_CASE("evicting exactly-dead vision is a decode no-op") {
    // Beacon fixtures underflow every decode-time text-to-vision weight to
    // exactly 0.0, so removing those rows cannot change the logits.
    const auto cfg = fixture_config(71);
    const auto fix = fixtures::build_fixture(FixtureKind::kVisionDeadAfter, cfg);
    auto dense = engine::prefill(fix.model, fix.stream);
    auto cache_full = dense.cache;
    std::vector<std::size_t> all_layers;
    for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
        all_layers.push_back(l);
    }
    auto cache_evicted = pruner::evict_vision_kv(dense.cache, all_layers);
    cache_evicted.next_position = cache_full.next_position;

    engine::DecodeInput input;
    input.token_id = 3;
    const auto a = engine::decode_step(fix.model, cache_full, input, fix.stream.size());
    const auto b = engine::decode_step(fix.model, cache_evicted, input, fix.stream.size());
    CHECK(a == b);
}

TEST_CASE("dropping zero-influence columns keeps the attention output bit-identical") {
    const auto cfg = fixture_config(81);
    const auto fix = fixtures::build_fixture(FixtureKind::kVisionDeadAfter, cfg);
    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto run = engine::prefill(fix.model, fix.stream, options);
    const auto& trace = run.traces[cfg.num_layers - 1];  // inside the dead region
    const std::size_t i = trace.row_positions.size() - 1;
    const std::size_t dk = cfg.head_dim();

    std::vector<double> with_all(cfg.hidden_dim, 0.0);
    std::vector<double> without_dead(cfg.hidden_dim, 0.0);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        for (std::size_t c = 0; c < trace.col_positions.size(); ++c) {
            const double w = trace.weights[h].at(i, c);
            for (std::size_t t = 0; t < dk; ++t) {
                with_all[h * dk + t] += w * trace.values[h].at(c, t);
            }
            if (trace.col_modalities[c] == Modality::kVision) {
                continue;  // dropped: its weight is exactly zero
            }
            for (std::size_t t = 0; t < dk; ++t) {
                without_dead[h * dk + t] += w * trace.values[h].at(c, t);
            }
        }
    }
    CHECK(with_all == without_dead);
}

TEST_SUITE_END();
