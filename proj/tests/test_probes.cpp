// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <thread>

#include "doctest.h"
#include "visipruner/errors.hpp"
#include "visipruner/fixtures.hpp"
#include "visipruner/probes.hpp"
#include "visipruner/rng.hpp"

using namespace visipruner;
using engine::Modality;
using fixtures::FixtureKind;

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

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::fabs(a[i] - b[i]));
    }
    return m;
}

}  // namespace

TEST_SUITE_BEGIN("probes");

TEST_CASE("knockout over an empty layer set is a no-op") {
    const auto cfg = fixture_config(2);
    const auto model = engine::init_model(cfg);
    Rng rng(3);
    const auto stream = engine::random_stream(cfg, 1, 4, 3, rng);
    const auto report =
        probes::knockout_cross_attention(model, stream, {}, probes::KnockoutMode::kCross);
    CHECK(report.delta.max_abs == 0.0);
    CHECK_FALSE(report.delta.argmax_changed);
}

TEST_CASE("knockout beyond the dead layer changes nothing") {
    const auto cfg = fixture_config(13);
    const auto fix = fixtures::build_fixture(FixtureKind::kVisionDeadAfter, cfg);
    std::vector<std::size_t> layers;
    for (std::size_t l = fix.facts.designated_layer + 1; l <= cfg.num_layers; ++l) {
        layers.push_back(l);
    }
    const auto report = probes::knockout_cross_attention(fix.model, fix.stream, layers,
                                                         probes::KnockoutMode::kCross);
    CHECK(report.delta.max_abs <= 1e-9);
}

TEST_CASE("knockout at the critical layer flips the argmax") {
    const auto cfg = fixture_config(29);
    const auto fix = fixtures::build_fixture(FixtureKind::kCriticalToken, cfg);
    const auto report = probes::knockout_cross_attention(
        fix.model, fix.stream, {fix.facts.designated_layer}, probes::KnockoutMode::kCross);
    CHECK(report.delta.argmax_changed);
}

TEST_CASE("out-of-range layers are rejected") {
    const auto cfg = fixture_config(2);
    const auto model = engine::init_model(cfg);
    Rng rng(4);
    const auto stream = engine::random_stream(cfg, 1, 3, 2, rng);
    CHECK_THROWS_AS(probes::knockout_cross_attention(model, stream, {cfg.num_layers + 1},
                                                     probes::KnockoutMode::kCross),
                    InputError);
}

TEST_CASE("masking sets composes to the union") {
    const auto cfg = fixture_config(17);
    const auto model = engine::init_model(cfg);
    Rng rng(18);
    const auto stream = engine::random_stream(cfg, 1, 6, 3, rng);
    const auto vision = stream.positions_of(Modality::kVision);
    const std::vector<std::size_t> a{vision[0], vision[2]};
    const std::vector<std::size_t> b{vision[2], vision[4], vision[5]};
    std::vector<std::size_t> uni{vision[0], vision[2], vision[4], vision[5]};
    const std::vector<std::size_t> layers{1, 2, 3};

    const auto sequential = probes::mask_vision_positions(model, stream, layers, {a, b});
    const auto unioned = probes::mask_vision_positions(model, stream, layers, {uni});
    CHECK(max_abs_diff(sequential.probed_logits, unioned.probed_logits) <= 1e-12);
    CHECK(sequential.masked_positions == uni);
}

TEST_CASE("fraction one equals a full cross knockout") {
    const auto cfg = fixture_config(19);
    const auto model = engine::init_model(cfg);
    Rng rng(20);
    const auto stream = engine::random_stream(cfg, 1, 5, 3, rng);
    const std::vector<std::size_t> layers{1, 2};
    const auto masked = probes::mask_attended_tokens(model, stream, layers, 1.0,
                                                     probes::MaskWhich::kTop,
                                                     probes::MaskCriterion::kAttnLast);
    const auto knock =
        probes::knockout_cross_attention(model, stream, layers, probes::KnockoutMode::kCross);
    CHECK(max_abs_diff(masked.probed_logits, knock.probed_logits) <= 1e-12);
    CHECK(std::fabs(masked.delta.max_abs - knock.delta.max_abs) <= 1e-12);
}

TEST_CASE("masked runs renormalize over the surviving columns") {
    const auto cfg = fixture_config(23);
    const auto model = engine::init_model(cfg);
    Rng rng(24);
    const auto stream = engine::random_stream(cfg, 1, 4, 3, rng);
    const auto vision = stream.positions_of(Modality::kVision);

    engine::PrefillOptions options;
    options.capture_traces = true;
    options.zero_output_on_degenerate = true;
    options.hooks.allow = [&](std::size_t layer, std::size_t, Modality row_mod,
                              std::size_t col_pos, Modality col_mod) {
        return !(layer == 2 && row_mod != Modality::kVision && col_mod == Modality::kVision &&
                 (col_pos == vision[0] || col_pos == vision[2]));
    };
    const auto run = engine::prefill(model, stream, options);
    const auto& trace = run.traces[1];
    for (std::size_t i = 0; i < trace.row_positions.size(); ++i) {
        for (const auto& w : trace.weights) {
            double total = 0.0;
            for (std::size_t j = 0; j < trace.col_positions.size(); ++j) {
                total += w.at(i, j);
            }
            CHECK(std::fabs(total - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("mask_half splits by position") {
    const auto cfg = fixture_config(25);
    const auto model = engine::init_model(cfg);
    Rng rng(26);
    {
        const auto stream = engine::random_stream(cfg, 1, 4, 2, rng);
        const auto left = probes::mask_half(model, stream, {1}, probes::MaskSide::kLeft);
        CHECK(left.masked_positions == std::vector<std::size_t>{1, 2});
    }
    {
        const auto stream = engine::random_stream(cfg, 1, 5, 2, rng);
        const auto left = probes::mask_half(model, stream, {1}, probes::MaskSide::kLeft);
        const auto right = probes::mask_half(model, stream, {1}, probes::MaskSide::kRight);
        CHECK(left.masked_positions == std::vector<std::size_t>{1, 2, 3});
        CHECK(right.masked_positions == std::vector<std::size_t>{4, 5});

        // Left and right together equal the full knockout.
        const auto both = probes::mask_vision_positions(
            model, stream, {1}, {left.masked_positions, right.masked_positions});
        const auto knock =
            probes::knockout_cross_attention(model, stream, {1}, probes::KnockoutMode::kCross);
        CHECK(max_abs_diff(both.probed_logits, knock.probed_logits) <= 1e-12);
    }
}

TEST_CASE("attended-token selection honors criteria and tie-breaks") {
    const auto cfg = fixture_config(27);
    const auto sink = fixtures::build_fixture(FixtureKind::kEngineeredSink, cfg);
    const auto report = probes::mask_attended_tokens(sink.model, sink.stream, {1}, 0.1,
                                                     probes::MaskWhich::kTop,
                                                     probes::MaskCriterion::kAttnLast);
    REQUIRE(report.masked_positions.size() == 1);
    CHECK(report.masked_positions[0] == sink.facts.designated_position);

    const auto uniform = fixtures::build_fixture(FixtureKind::kUniform, cfg);
    const auto bottom = probes::mask_attended_tokens(uniform.model, uniform.stream, {1}, 0.25,
                                                     probes::MaskWhich::kBottom,
                                                     probes::MaskCriterion::kAttnLast);
    const auto vision = uniform.stream.positions_of(Modality::kVision);
    CHECK(bottom.masked_positions ==
          std::vector<std::size_t>{vision[0], vision[1]});  // ties break low
}

TEST_CASE("pos-near-text selects the vision tail") {
    const auto cfg = fixture_config(28);
    const auto model = engine::init_model(cfg);
    Rng rng(29);
    const auto stream = engine::random_stream(cfg, 1, 6, 3, rng);
    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto run = engine::prefill(model, stream, options);
    const auto picked = probes::select_masked_positions(run.traces[0], 0.5,
                                                        probes::MaskWhich::kTop,
                                                        probes::MaskCriterion::kPosNearText);
    const auto vision = stream.positions_of(Modality::kVision);
    CHECK(picked == std::vector<std::size_t>{vision[3], vision[4], vision[5]});
}

TEST_CASE("vision self-attention masking can leave degenerate rows") {
    const auto cfg = fixture_config(30);
    const auto fix = fixtures::build_fixture(FixtureKind::kUniform, cfg);  // no system segment
    const auto report = probes::knockout_cross_attention(fix.model, fix.stream, {1},
                                                         probes::KnockoutMode::kCrossAndVision);
    CHECK(report.degenerate_rows > 0);  // the first vision row loses every column
}

TEST_CASE("logit lens is a distribution and matches the final logits") {
    const auto cfg = fixture_config(35);
    const auto model = engine::init_model(cfg);
    Rng rng(36);
    const auto stream = engine::random_stream(cfg, 1, 3, 3, rng);
    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto run = engine::prefill(model, stream, options);

    const auto& final_hidden = run.traces.back().hidden_out;
    const auto lens = probes::logit_lens(model, final_hidden.row(final_hidden.rows - 1));
    double total = 0.0;
    for (double p : lens.distribution) {
        CHECK(p >= 0.0);
        total += p;
    }
    CHECK(std::fabs(total - 1.0) <= 1e-9);

    const std::vector<std::uint8_t> allow(run.logits.size(), 1);
    const auto direct = kernels::masked_softmax_row(run.logits, allow);
    CHECK(max_abs_diff(lens.distribution, direct) <= 1e-12);

    // Every layer's hidden state projects to a distribution.
    for (const auto& trace : run.traces) {
        const auto mid = probes::logit_lens(model, trace.hidden_out.row(0));
        double s = 0.0;
        for (double p : mid.distribution) {
            s += p;
        }
        CHECK(std::fabs(s - 1.0) <= 1e-9);
    }
}

TEST_CASE("identity unembedding turns the lens into a coordinate reader") {
    engine::ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.hidden_dim = 8;
    cfg.num_heads = 2;
    cfg.ffn_dim = 8;
    cfg.vocab_size = 8;
    cfg.seed = 1;
    auto model = engine::init_model(cfg);
    model.unembedding = kernels::RealMatrix(8, 8);
    for (std::size_t i = 0; i < 8; ++i) {
        model.unembedding.at(i, i) = 1.0;
    }
    std::vector<double> hidden(8, 0.0);
    hidden[3] = 1.0;
    const auto lens = probes::logit_lens(model, hidden);
    CHECK(lens.top_ids[0] == 3);

    const std::vector<double> zero(8, 0.0);
    const auto uniform = probes::logit_lens(model, zero);
    for (double p : uniform.distribution) {
        CHECK(p == doctest::Approx(1.0 / 8.0).epsilon(1e-12));
    }
}

TEST_CASE("vo projection is linear and consistent with the lens") {
    const auto cfg = fixture_config(45);
    const auto model = engine::init_model(cfg);
    const std::size_t dk = cfg.head_dim();

    const std::vector<double> zero(dk, 0.0);
    const auto z = probes::vo_projection(model, 2, 1, zero);
    for (double s : z.scores) {
        CHECK(s == 0.0);
    }

    Rng rng(46);
    std::vector<double> value(dk);
    for (double& v : value) {
        v = rng.next_symmetric();
    }
    const auto once = probes::vo_projection(model, 2, 1, value);
    std::vector<double> doubled(value);
    for (double& v : doubled) {
        v *= 2.0;
    }
    const auto twice = probes::vo_projection(model, 2, 1, doubled);
    for (std::size_t i = 0; i < once.scores.size(); ++i) {
        CHECK(twice.scores[i] == 2.0 * once.scores[i]);  // exact power-of-two scaling
    }
    CHECK(once.top_ids == twice.top_ids);

    // Summed over heads with the real value rows, the projection equals the
    // lens reading of the O-projected attention output.
    Rng srng(47);
    const auto stream = engine::random_stream(cfg, 1, 3, 3, srng);
    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto run = engine::prefill(model, stream, options);
    const std::size_t layer = 2;
    const auto& trace = run.traces[layer - 1];
    const std::size_t last = trace.row_positions.size() - 1;

    std::vector<double> summed(cfg.vocab_size, 0.0);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        std::vector<double> v(dk);
        for (std::size_t t = 0; t < dk; ++t) {
            v[t] = trace.values[h].at(last, t);
        }
        const auto vo = probes::vo_projection(model, layer, h, v);
        for (std::size_t i = 0; i < summed.size(); ++i) {
            summed[i] += vo.scores[i];
        }
    }
    // trace.values hold the value rows of the last column = last position.
    const auto o_proj =
        kernels::vecmat(trace.attn_output.row(last), model.layers[layer - 1].w_o);
    const auto direct = engine::unembed(model, o_proj);
    // The identity holds when the attention output is exactly the last
    // token's value row; build that case explicitly instead.
    std::vector<double> concat(cfg.hidden_dim, 0.0);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        for (std::size_t t = 0; t < dk; ++t) {
            concat[h * dk + t] = trace.values[h].at(last, t);
        }
    }
    const auto projected = kernels::vecmat(concat, model.layers[layer - 1].w_o);
    const auto expect = engine::unembed(model, projected);
    CHECK(max_abs_diff(summed, expect) <= 1e-9);
    (void)direct;
}

TEST_CASE("sink stats flag only engineered sinks") {
    const auto cfg = fixture_config(55);
    const auto sink = fixtures::build_fixture(FixtureKind::kEngineeredSink, cfg);
    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto run = engine::prefill(sink.model, sink.stream, options);
    const auto report = probes::sink_stats(run.traces[0]);
    std::size_t flagged = 0;
    for (const auto& stat : report.tokens) {
        flagged += stat.sink_flag ? 1 : 0;
    }
    CHECK(flagged == 1);

    const auto uniform = fixtures::build_fixture(FixtureKind::kUniform, cfg);
    const auto urun = engine::prefill(uniform.model, uniform.stream, options);
    const auto ureport = probes::sink_stats(urun.traces[0]);
    for (const auto& stat : ureport.tokens) {
        CHECK_FALSE(stat.sink_flag);  // exact ties leave no top decile
    }
}

TEST_CASE("probes run in parallel over one shared model") {
    const auto cfg = fixture_config(60);
    const auto model = engine::init_model(cfg);
    Rng rng(61);
    const auto stream = engine::random_stream(cfg, 1, 5, 3, rng);
    const auto serial =
        probes::knockout_cross_attention(model, stream, {2, 3}, probes::KnockoutMode::kCross);

    std::vector<probes::MaskProbeReport> results(4);
    std::vector<std::thread> workers;
    workers.reserve(results.size());
    for (auto& slot : results) {
        workers.emplace_back([&model, &stream, &slot] {
            slot = probes::knockout_cross_attention(model, stream, {2, 3},
                                                    probes::KnockoutMode::kCross);
        });
    }
    for (auto& w : workers) {
        w.join();
    }
    for (const auto& r : results) {
        CHECK(r.probed_logits == serial.probed_logits);
    }
}

TEST_CASE("removing the flagged sink redistributes its mass") {
    const auto cfg = fixture_config(65);
    const auto sink = fixtures::build_fixture(FixtureKind::kEngineeredSink, cfg);
    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto run = engine::prefill(sink.model, sink.stream, options);
    const auto before = probes::sink_stats(run.traces[0]);

    engine::TokenStream without;
    std::size_t pos = 0;
    for (const auto& e : sink.stream.entries) {
        if (e.position == sink.facts.designated_position) {
            continue;
        }
        auto copy = e;
        copy.position = pos++;
        without.entries.push_back(std::move(copy));
    }
    const auto rerun = engine::prefill(sink.model, without, options);
    const auto after = probes::sink_stats(rerun.traces[0]);

    const double before_total =
        before.system_mass + before.vision_mass + before.instruction_mass;
    const double after_total = after.system_mass + after.vision_mass + after.instruction_mass;
    CHECK(std::fabs(before_total - double(cfg.num_heads)) <= 1e-12);
    CHECK(std::fabs(after_total - double(cfg.num_heads)) <= 1e-12);
    CHECK(after.vision_mass < before.vision_mass);
}

TEST_SUITE_END();
