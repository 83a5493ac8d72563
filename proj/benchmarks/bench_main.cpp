// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "visipruner/cost.hpp"
#include "visipruner/fixtures.hpp"
#include "visipruner/probes.hpp"

using namespace visipruner;

namespace {

engine::ModelConfig bench_config(std::size_t layers, std::size_t hidden) {
    engine::ModelConfig cfg;
    cfg.num_layers = layers;
    cfg.hidden_dim = hidden;
    cfg.num_heads = 4;
    cfg.ffn_dim = hidden * 2;
    cfg.vocab_size = 257;
    cfg.seed = 7;
    return cfg;
}

void BM_Matmul(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    kernels::RealMatrix a(n, n);
    kernels::RealMatrix b(n, n);
    for (auto& v : a.data) v = rng.next_symmetric();
    for (auto& v : b.data) v = rng.next_symmetric();
    for (auto _ : state) {
        benchmark::DoNotOptimize(kernels::matmul(a, b));
    }
    state.counters["macs"] = static_cast<double>(n) * n * n;
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(128);

void BM_DensePrefill(benchmark::State& state) {
    const auto cfg = bench_config(static_cast<std::size_t>(state.range(0)), 64);
    const auto model = engine::init_model(cfg);
    Rng rng(3);
    const auto stream = engine::random_stream(cfg, 2, 24, 6, rng);
    for (auto _ : state) {
        benchmark::DoNotOptimize(engine::prefill(model, stream));
    }
    state.counters["tokens"] = static_cast<double>(stream.size());
}
BENCHMARK(BM_DensePrefill)->Arg(4)->Arg(8);

void BM_ApplySchedule(benchmark::State& state) {
    const auto cfg = bench_config(8, 64);
    const auto fix = fixtures::build_fixture(fixtures::FixtureKind::kVisionDeadAfter, cfg,
                                             {2, 10, 6, 0});
    pruner::PruneParams params;
    for (auto _ : state) {
        benchmark::DoNotOptimize(pruner::apply_schedule(fix.model, fix.stream, params));
    }
}
BENCHMARK(BM_ApplySchedule);

void BM_InfluenceProbe(benchmark::State& state) {
    const auto cfg = bench_config(6, 64);
    const auto model = engine::init_model(cfg);
    Rng rng(5);
    const auto stream = engine::random_stream(cfg, 2, 32, 6, rng);
    pruner::PruneParams params;
    for (auto _ : state) {
        benchmark::DoNotOptimize(pruner::probe_layer_influences(model, stream, 3, params));
    }
}
BENCHMARK(BM_InfluenceProbe);

void BM_PaperFlops(benchmark::State& state) {
    const auto params = cost::llava7b_preset();
    for (auto _ : state) {
        benchmark::DoNotOptimize(cost::paper_flops(params));
    }
}
BENCHMARK(BM_PaperFlops);

}  // namespace

BENCHMARK_MAIN();
