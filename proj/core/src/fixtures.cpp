// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include "visipruner/fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "visipruner/errors.hpp"
#include "visipruner/pruner.hpp"
#include "visipruner/rng.hpp"

namespace visipruner::fixtures {

using engine::Modality;
using engine::Model;
using engine::ModelConfig;
using engine::TokenEntry;
using engine::TokenStream;

FixtureKind fixture_kind_from_name(std::string_view name) {
    if (name == "engineered-sink") return FixtureKind::kEngineeredSink;
    if (name == "critical-token") return FixtureKind::kCriticalToken;
    if (name == "vision-dead-after-l") return FixtureKind::kVisionDeadAfter;
    if (name == "uniform") return FixtureKind::kUniform;
    throw InputError("unknown fixture kind: " + std::string(name));
}

const char* fixture_kind_name(FixtureKind kind) {
    switch (kind) {
        case FixtureKind::kEngineeredSink: return "engineered-sink";
        case FixtureKind::kCriticalToken: return "critical-token";
        case FixtureKind::kVisionDeadAfter: return "vision-dead-after-l";
        case FixtureKind::kUniform: return "uniform";
    }
    return "unknown";
}

namespace {

// The engineered fixtures reserve three hidden coordinates as routing
// channels and steer attention through per-layer key/query rows aligned with
// a shared per-head direction:
//   coord 0  modality beacon: text carries -kChannel, vision +kChannel, so
//            every cross-modality score lands ~1000 below the row maximum
//            and its softmax weight underflows to exactly 0.0;
//   coord 1  punch channel: the designated vision token carries +kChannel
//            and, at punch-active layers, an opposing key row flips its score
//            sign so every text row locks onto it;
//   coord 2  park channel: system tokens attract vision rows, so a vision
//            row's evolution never depends on its siblings.
// Value rows for the channels are scaled to ~0 so influence comes from the
// content coordinates alone.
constexpr std::size_t kBeaconCoord = 0;
constexpr std::size_t kPunchCoord = 1;
constexpr std::size_t kParkCoord = 2;
constexpr std::size_t kNumChannels = 3;
constexpr double kAlign = 9.0;       // beacon row scale
constexpr double kPunchAlign = 36.0; // punch row scale
constexpr double kParkAlign = 39.0;  // park row scale
constexpr double kValueEps = 1e-3;
constexpr double kPunchValueScale = 8.0;  // value signature of the punched token
constexpr std::size_t kCriticalVocabRow = 0;
constexpr double kCriticalRowScale = 3.0;

double channel_magnitude(const ModelConfig& config) {
    return 50.0 * std::sqrt(static_cast<double>(config.hidden_dim));
}

std::vector<double> head_direction(const ModelConfig& config, Rng& rng) {
    const std::size_t head_dim = config.head_dim();
    std::vector<double> u(config.hidden_dim, 0.0);
    for (std::size_t h = 0; h < config.num_heads; ++h) {
        double norm_sq = 0.0;
        for (std::size_t t = 0; t < head_dim; ++t) {
            u[h * head_dim + t] = rng.next_symmetric();
            norm_sq += u[h * head_dim + t] * u[h * head_dim + t];
        }
        const double inv = 1.0 / std::sqrt(norm_sq + 1e-30);
        for (std::size_t t = 0; t < head_dim; ++t) {
            u[h * head_dim + t] *= inv;
        }
    }
    return u;
}

void set_row(kernels::RealMatrix& m, std::size_t row, const std::vector<double>& values,
             double scale) {
    for (std::size_t j = 0; j < m.cols; ++j) {
        m.at(row, j) = values[j] * scale;
    }
}

void zero_row(kernels::RealMatrix& m, std::size_t row) {
    for (std::size_t j = 0; j < m.cols; ++j) {
        m.at(row, j) = 0.0;
    }
}

std::vector<double> content_vector(const ModelConfig& config, double norm, Rng& rng) {
    std::vector<double> e(config.hidden_dim, 0.0);
    if (norm == 0.0) {
        return e;
    }
    double norm_sq = 0.0;
    for (std::size_t j = kNumChannels; j < config.hidden_dim; ++j) {
        e[j] = rng.next_symmetric();
        norm_sq += e[j] * e[j];
    }
    const double inv = norm / std::sqrt(norm_sq + 1e-30);
    for (std::size_t j = kNumChannels; j < config.hidden_dim; ++j) {
        e[j] *= inv;
    }
    return e;
}

TokenEntry raw_entry(std::size_t position, Modality modality, std::vector<double> embedding) {
    TokenEntry e;
    e.position = position;
    e.modality = modality;
    e.has_embedding = true;
    e.embedding = std::move(embedding);
    return e;
}

struct BuildPlan {
    FixtureKind kind;
    std::size_t designated_layer = 0;      // punch layer (critical) / last alive (dead)
    std::size_t designated_offset = 0;     // index within the vision segment
    std::vector<std::uint8_t> punch_at;    // per layer, 1-based index
};

bool punch_active(const BuildPlan& plan, std::size_t layer) {
    return plan.punch_at.size() >= layer && plan.punch_at[layer - 1] != 0;
}

Model build_engineered_model(const ModelConfig& config, const BuildPlan& plan, Rng& rng) {
    Model model = engine::init_model(config);
    Rng dirs = rng.fork(0x6469721);
    for (std::size_t layer = 1; layer <= config.num_layers; ++layer) {
        auto& lw = model.layers[layer - 1];
        const auto u = head_direction(config, dirs);
        for (std::size_t c = 0; c < kNumChannels; ++c) {
            zero_row(lw.w_q, c);
            zero_row(lw.w_k, c);
            for (std::size_t j = 0; j < lw.w_v.cols; ++j) {
                lw.w_v.at(c, j) *= kValueEps;
            }
        }
        set_row(lw.w_q, kBeaconCoord, u, kAlign);
        set_row(lw.w_k, kBeaconCoord, u, kAlign);
        set_row(lw.w_k, kParkCoord, u, kParkAlign);
        if (punch_active(plan, layer)) {
            set_row(lw.w_k, kPunchCoord, u, -kPunchAlign);
        }
        if (plan.kind != FixtureKind::kEngineeredSink) {
            // Only the punched token carries the punch coordinate, so this row
            // gives it a large, distinctive value vector without touching
            // anyone else's.
            Rng vdir = dirs.fork(layer);
            std::vector<double> vrow(config.hidden_dim);
            double norm_sq = 0.0;
            for (double& x : vrow) {
                x = vdir.next_symmetric();
                norm_sq += x * x;
            }
            const double inv = kPunchValueScale / std::sqrt(norm_sq + 1e-30);
            for (std::size_t j = 0; j < config.hidden_dim; ++j) {
                lw.w_v.at(kPunchCoord, j) = vrow[j] * inv;
            }
        }
    }
    // Logits read the content coordinates, not the routing channels.
    for (std::size_t v = 0; v < config.vocab_size; ++v) {
        for (std::size_t c = 0; c < kNumChannels; ++c) {
            model.unembedding.at(v, c) *= kValueEps;
        }
    }
    return model;
}

std::vector<double> final_hidden_last_row(const Model& model, const TokenStream& stream,
                                          const engine::AttentionHooks* hooks) {
    kernels::RealMatrix hidden = engine::embed_stream(model, stream);
    std::vector<std::size_t> positions(stream.size());
    std::vector<Modality> modalities(stream.size());
    std::vector<std::size_t> all(stream.size());
    for (std::size_t i = 0; i < stream.size(); ++i) {
        positions[i] = stream.entries[i].position;
        modalities[i] = stream.entries[i].modality;
        all[i] = i;
    }
    for (std::size_t layer = 1; layer <= model.config.num_layers; ++layer) {
        engine::LayerForwardSpec spec;
        spec.layer = layer;
        spec.attend_rows = all;
        spec.key_cols = all;
        spec.hooks = hooks;
        engine::layer_forward(model, hidden, positions, modalities, spec);
    }
    const auto row = hidden.row(hidden.rows - 1);
    return {row.begin(), row.end()};
}

// Dedicates one vocabulary row to the measured dense-vs-knockout hidden
// difference so masking the critical token demonstrably changes the answer.
// The row is orthogonalized against the knockout state and confined to the
// content coordinates.
bool plant_critical_vocab_row(Model& model, const TokenStream& stream, std::size_t layer) {
    engine::AttentionHooks knockout;
    knockout.allow = [layer](std::size_t l, std::size_t, Modality row_mod, std::size_t,
                             Modality col_mod) {
        return !(l == layer && row_mod != Modality::kVision && col_mod == Modality::kVision);
    };
    const auto h_dense = final_hidden_last_row(model, stream, nullptr);
    const auto h_knock = final_hidden_last_row(model, stream, &knockout);

    const std::size_t d = model.config.hidden_dim;
    std::vector<double> delta(d, 0.0);
    std::vector<double> base(d, 0.0);
    for (std::size_t j = kNumChannels; j < d; ++j) {
        delta[j] = h_dense[j] - h_knock[j];
        base[j] = h_knock[j];
    }
    const double base_norm = kernels::l2_norm(base);
    if (base_norm > 0.0) {
        const double proj = kernels::dot(delta, base) / (base_norm * base_norm);
        for (std::size_t j = kNumChannels; j < d; ++j) {
            delta[j] -= proj * base[j];
        }
    }
    const double delta_norm = kernels::l2_norm(delta);
    if (delta_norm < 1.0) {
        return false;
    }
    for (std::size_t j = 0; j < d; ++j) {
        model.unembedding.at(kCriticalVocabRow, j) =
            j < kNumChannels ? 0.0 : delta[j] * (kCriticalRowScale / delta_norm);
    }
    return true;
}

TokenStream build_engineered_stream(const ModelConfig& config, const FixtureOptions& options,
                                    const BuildPlan& plan, Rng& rng) {
    const double channel = channel_magnitude(config);
    const double text_content = channel / 4.0;
    TokenStream stream;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < options.n_system; ++i) {
        auto e = content_vector(config, text_content, rng);
        e[kBeaconCoord] = -channel;
        e[kParkCoord] = channel;
        stream.entries.push_back(raw_entry(pos++, Modality::kSystem, std::move(e)));
    }
    for (std::size_t i = 0; i < options.n_vision; ++i) {
        const bool designated = i == plan.designated_offset;
        const bool sink = designated && plan.kind == FixtureKind::kEngineeredSink;
        auto e = content_vector(config, sink ? 0.0 : channel, rng);
        e[kBeaconCoord] = channel;
        if (designated) {
            e[kPunchCoord] = channel;
        }
        stream.entries.push_back(raw_entry(pos++, Modality::kVision, std::move(e)));
    }
    for (std::size_t i = 0; i < options.n_instruction; ++i) {
        auto e = content_vector(config, text_content, rng);
        e[kBeaconCoord] = -channel;
        stream.entries.push_back(raw_entry(pos++, Modality::kInstruction, std::move(e)));
    }
    stream.validate();
    return stream;
}

std::size_t argmax(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) {
            best = i;
        }
    }
    return best;
}

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

double median(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// Dense-run checks of every fact the construction promises. Returns false to
// trigger a content re-roll.
bool verify_engineered(const Model& model, const TokenStream& stream, const BuildPlan& plan,
                       FixtureFacts& facts) {
    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto run = engine::prefill(model, stream, options);
    const std::size_t num_layers = model.config.num_layers;
    const std::size_t designated_pos = stream.positions_of(Modality::kVision)
                                           [plan.designated_offset];
    facts.designated_position = designated_pos;

    // Cross-modality deadness: text never attends vision outside the punch.
    for (std::size_t layer = 1; layer <= num_layers; ++layer) {
        const auto& trace = run.traces[layer - 1];
        for (std::size_t i = 0; i < trace.row_positions.size(); ++i) {
            if (trace.row_modalities[i] == Modality::kVision) {
                continue;
            }
            for (std::size_t j = 0; j < trace.col_positions.size(); ++j) {
                if (trace.col_modalities[j] != Modality::kVision) {
                    continue;
                }
                if (punch_active(plan, layer) && trace.col_positions[j] == designated_pos) {
                    continue;
                }
                for (const auto& w : trace.weights) {
                    if (w.at(i, j) != 0.0) {
                        return false;
                    }
                }
            }
        }
    }

    const auto influence_at = [&](std::size_t layer) {
        return pruner::layer_influences(run.traces[layer - 1]);
    };
    const auto find_designated = [&](const std::vector<pruner::InfluenceRecord>& records)
        -> const pruner::InfluenceRecord* {
        for (const auto& r : records) {
            if (r.token_position == designated_pos) {
                return &r;
            }
        }
        return nullptr;
    };

    if (plan.kind == FixtureKind::kEngineeredSink) {
        const auto& t1 = run.traces[0];
        std::vector<double> masses;
        std::vector<double> l1s;
        double sink_mass = 0.0;
        double sink_l1 = 0.0;
        for (std::size_t j = 0; j < t1.col_positions.size(); ++j) {
            if (t1.col_modalities[j] != Modality::kVision) {
                continue;
            }
            const double mass = t1.last_row_mass(j);
            masses.push_back(mass);
            l1s.push_back(t1.value_l1[j]);
            if (t1.col_positions[j] == designated_pos) {
                sink_mass = mass;
                sink_l1 = t1.value_l1[j];
            }
        }
        const double per_head_share = sink_mass / static_cast<double>(t1.num_heads());
        const double p90 = percentile90_linear(masses);
        const double med = median(l1s);
        facts.sink_last_row_mass = sink_mass;
        facts.sink_value_l1 = sink_l1;
        facts.median_vision_value_l1 = med;
        if (per_head_share < 0.5 || !(sink_l1 < med) || !(sink_mass > p90)) {
            return false;
        }
        // No other vision token may satisfy the sink rule.
        for (std::size_t j = 0, v = 0; j < t1.col_positions.size(); ++j) {
            if (t1.col_modalities[j] != Modality::kVision) {
                continue;
            }
            const bool flagged = masses[v] > p90 && l1s[v] < med;
            ++v;
            if (flagged && t1.col_positions[j] != designated_pos) {
                return false;
            }
        }
        const auto records = influence_at(1);
        const auto* rec = find_designated(records);
        if (rec == nullptr || rec->l2 >= 0.15) {
            return false;  // value-aware selection must be able to exclude it
        }
        facts.designated_l2 = rec->l2;
        facts.designated_cosine = rec->cosine;
        return true;
    }

    // Critical and vision-dead share the punch bookkeeping.
    for (std::size_t layer = 2; layer <= num_layers; ++layer) {
        const auto records = influence_at(layer);
        const auto* rec = find_designated(records);
        if (rec == nullptr) {
            return false;
        }
        if (punch_active(plan, layer)) {
            if (!(rec->l2 >= 1.05 && rec->cosine <= 0.99)) {
                return false;
            }
            for (const auto& r : records) {
                if (r.token_position == designated_pos) {
                    continue;
                }
                if (!(r.l2 < rec->l2 && r.cosine > rec->cosine)) {
                    return false;  // designated must be the strict extreme
                }
                if (!(r.cosine >= 1.0 - 1e-9 && r.l2 <= 1e-9)) {
                    return false;
                }
            }
            if (layer == plan.designated_layer) {
                facts.designated_l2 = rec->l2;
                facts.designated_cosine = rec->cosine;
            }
        } else {
            for (const auto& r : records) {
                if (!(r.cosine >= 1.0 - 1e-9 && r.l2 <= 1e-9)) {
                    return false;
                }
            }
        }
    }

    if (plan.kind == FixtureKind::kCriticalToken) {
        // Knocking out cross attention at the punch layer must flip the answer.
        engine::PrefillOptions masked;
        masked.hooks.allow = [&plan](std::size_t layer, std::size_t, Modality row_mod,
                                     std::size_t, Modality col_mod) {
            return !(layer == plan.designated_layer && row_mod != Modality::kVision &&
                     col_mod == Modality::kVision);
        };
        const auto masked_run = engine::prefill(model, stream, masked);
        facts.argmax_flips_under_knockout =
            argmax(masked_run.logits) != argmax(run.logits);
        if (!facts.argmax_flips_under_knockout) {
            return false;
        }
    }
    return true;
}

bool verify_uniform(const Model& model, const TokenStream& stream, FixtureFacts& facts) {
    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto run = engine::prefill(model, stream, options);
    const auto& t1 = run.traces[0];
    double first_l1 = -1.0;
    double first_mass = -1.0;
    for (std::size_t j = 0; j < t1.col_positions.size(); ++j) {
        if (t1.col_modalities[j] != Modality::kVision) {
            continue;
        }
        if (first_l1 < 0.0) {
            first_l1 = t1.value_l1[j];
            first_mass = t1.last_row_mass(j);
            continue;
        }
        if (t1.value_l1[j] != first_l1 || t1.last_row_mass(j) != first_mass) {
            return false;
        }
    }
    facts.vision_identical = true;
    return true;
}

}  // namespace

Fixture build_fixture(std::string_view kind_name, const ModelConfig& config,
                      const FixtureOptions& options) {
    return build_fixture(fixture_kind_from_name(kind_name), config, options);
}

Fixture build_fixture(FixtureKind kind, const ModelConfig& config,
                      const FixtureOptions& options) {
    config.validate();
    ModelConfig cfg = config;
    cfg.positional = engine::PositionalEncoding::kNone;

    if (options.n_instruction < 1) {
        throw InputError("build_fixture: at least one instruction token is required");
    }
    if (kind == FixtureKind::kUniform) {
        if (options.n_vision < 1) {
            throw InputError("build_fixture: uniform fixture needs a vision token");
        }
        // The uniform fixture keeps the vision rows exactly interchangeable,
        // which requires an empty system segment.
        for (std::size_t retry = 0; retry < 32; ++retry) {
            cfg.seed = Rng(config.seed).fork(retry).next_u64();
            Model model = engine::init_model(cfg);
            Rng rng(cfg.seed ^ 0x5554454d);
            TokenStream stream;
            std::size_t pos = 0;
            std::vector<double> shared(cfg.hidden_dim);
            const double scale = std::sqrt(3.0);
            for (double& v : shared) {
                v = rng.next_symmetric() * scale;
            }
            for (std::size_t i = 0; i < options.n_vision; ++i) {
                stream.entries.push_back(raw_entry(pos++, Modality::kVision, shared));
            }
            for (std::size_t i = 0; i < options.n_instruction; ++i) {
                TokenEntry e;
                e.position = pos++;
                e.modality = Modality::kInstruction;
                e.token_id = static_cast<std::uint32_t>(rng.next_below(cfg.vocab_size));
                stream.entries.push_back(std::move(e));
            }
            stream.validate();
            FixtureFacts facts;
            facts.kind = kind;
            facts.build_retries = retry;
            if (verify_uniform(model, stream, facts)) {
                return {std::move(model), std::move(stream), facts};
            }
        }
        throw InvariantViolation("build_fixture: uniform fixture failed verification");
    }

    // Engineered kinds.
    if (cfg.hidden_dim < 16) {
        throw InputError("build_fixture: engineered fixtures need hidden_dim >= 16");
    }
    if (options.n_system < 1) {
        throw InputError("build_fixture: engineered fixtures need a system token");
    }
    if (options.n_vision < 2) {
        throw InputError("build_fixture: engineered fixtures need >= 2 vision tokens");
    }
    if (kind == FixtureKind::kEngineeredSink && options.n_vision > 10) {
        // The top-decile rule stays single-token-exact only up to 10 tokens.
        throw InputError("build_fixture: engineered-sink supports at most 10 vision tokens");
    }

    BuildPlan plan;
    plan.kind = kind;
    plan.punch_at.assign(cfg.num_layers, 0);

    switch (kind) {
        case FixtureKind::kEngineeredSink:
            plan.designated_layer = 1;
            plan.punch_at[0] = 1;
            break;
        case FixtureKind::kCriticalToken: {
            std::size_t layer = options.designated_layer;
            if (layer == 0) {
                layer = std::clamp<std::size_t>(cfg.num_layers / 2, 2,
                                                std::max<std::size_t>(2, cfg.num_layers - 2));
            }
            if (layer < 2 || layer > cfg.num_layers) {
                throw InputError("build_fixture: critical layer must be in [2, L]");
            }
            plan.designated_layer = layer;
            plan.punch_at[layer - 1] = 1;
            break;
        }
        case FixtureKind::kVisionDeadAfter: {
            std::size_t layer = options.designated_layer;
            if (layer == 0) {
                layer = cfg.num_layers >= 4 ? cfg.num_layers - 2 : 2;
            }
            if (layer < 2 || layer > cfg.num_layers) {
                throw InputError("build_fixture: dead-after layer must be in [2, L]");
            }
            plan.designated_layer = layer;
            for (std::size_t l = 2; l <= layer; ++l) {
                plan.punch_at[l - 1] = 1;
            }
            break;
        }
        case FixtureKind::kUniform:
            break;
    }
    // Keep the designated token away from the merge default (first position).
    plan.designated_offset = options.n_vision / 2;

    for (std::size_t retry = 0; retry < 32; ++retry) {
        cfg.seed = Rng(config.seed).fork(0x464958 + retry).next_u64();
        Rng rng(cfg.seed ^ 0x454d4245);
        Model model = build_engineered_model(cfg, plan, rng);
        TokenStream stream = build_engineered_stream(cfg, options, plan, rng);
        if (kind == FixtureKind::kCriticalToken &&
            !plant_critical_vocab_row(model, stream, plan.designated_layer)) {
            continue;
        }

        FixtureFacts facts;
        facts.kind = kind;
        facts.designated_layer = plan.designated_layer;
        facts.build_retries = retry;
        if (kind == FixtureKind::kVisionDeadAfter) {
            facts.expected_filtering_layer = 2;
            facts.expected_exit_layer =
                plan.designated_layer + 2 <= cfg.num_layers ? plan.designated_layer + 2 : 0;
        } else if (kind == FixtureKind::kCriticalToken) {
            facts.expected_filtering_layer = plan.designated_layer;
            facts.expected_exit_layer =
                plan.designated_layer + 2 <= cfg.num_layers ? plan.designated_layer + 2 : 0;
        }
        if (verify_engineered(model, stream, plan, facts)) {
            return {std::move(model), std::move(stream), facts};
        }
    }
    throw InvariantViolation("build_fixture: engineered fixture failed verification after "
                             "32 content re-rolls");
}

}  // namespace visipruner::fixtures

