// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0
//
// Batch experiment driver: dense baselines, pruned runs, analysis probes and
// cost reports from one JSON run configuration. Exit codes: 0 success,
// 2 configuration error, 3 numerical invariant violation, 4 I/O error.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "visipruner/cost.hpp"
#include "visipruner/errors.hpp"
#include "visipruner/fixtures.hpp"
#include "visipruner/probes.hpp"
#include "visipruner/report_json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace visipruner;

namespace {

// ---------------------------------------------------------------- output --

struct OutputDir {
    fs::path dir;
    std::vector<std::string> written;

    void prepare() {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) {
            throw IoError("cannot create output directory " + dir.string() + ": " +
                          ec.message());
        }
    }

    // Atomic write: temp file in the same directory, then rename.
    void write(const std::string& name, const std::string& content) {
        const fs::path target = dir / name;
        const fs::path tmp = dir / (name + ".tmp");
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) {
                throw IoError("cannot open " + tmp.string() + " for writing");
            }
            out << content;
            if (!out) {
                throw IoError("failed writing " + tmp.string());
            }
        }
        std::error_code ec;
        fs::rename(tmp, target, ec);
        if (ec) {
            throw IoError("failed to move " + tmp.string() + " into place: " + ec.message());
        }
        written.push_back(name);
    }
};

fs::path resolve_out_dir(const std::string& flag_value) {
    // The environment override wins so batch wrappers can redirect runs.
    if (const char* env = std::getenv("VISIPRUNER_OUT"); env != nullptr && *env != '\0') {
        return fs::path(env);
    }
    return fs::path(flag_value);
}

// ------------------------------------------------------------ run config --

void require_keys(const json& obj, const std::set<std::string>& allowed,
                  const std::string& where) {
    if (!obj.is_object()) {
        throw ConfigError(where + ": expected an object");
    }
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (allowed.count(key) == 0) {
            throw ConfigError(where + ": unknown key '" + key + "'");
        }
    }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback, const std::string& where) {
    if (!obj.contains(key)) {
        return fallback;
    }
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + "." + key + ": wrong type");
    }
}

struct StreamSpec {
    std::string kind = "random";
    std::size_t n_system = 2;
    std::size_t n_vision = 8;
    std::size_t n_instruction = 4;
    std::size_t designated_layer = 0;
};

struct ProbeSpec {
    std::string kind;
    std::vector<std::size_t> layers;
    std::string mode = "C";
    double fraction = 0.1;
    std::string which = "top";
    std::string criterion = "attn-last";
    std::string side = "left";
    std::size_t layer = 1;
    std::size_t head = 0;
    std::size_t top_n = 10;
    bool softmax = false;
};

struct RunConfig {
    std::uint64_t seed = 1;
    engine::ModelConfig model;
    StreamSpec stream;
    bool prune_enabled = true;
    pruner::PruneParams prune;
    std::vector<ProbeSpec> probes;
    bool cost_paper = true;
    bool cost_mac = true;
    bool full_matrices = false;
    json echo;  // parsed document, embedded in the summary
};

RunConfig parse_run_config(const json& doc) {
    require_keys(doc, {"version", "seed", "model", "stream", "prune", "probes", "cost",
                       "output"},
                 "config");
    if (!doc.contains("version") || !doc.at("version").is_number_integer() ||
        doc.at("version").get<int>() != 1) {
        throw ConfigError("config.version: must be the integer 1");
    }

    RunConfig cfg;
    cfg.echo = doc;
    cfg.seed = get_or<std::uint64_t>(doc, "seed", 1, "config");

    if (!doc.contains("model")) {
        throw ConfigError("config.model: required");
    }
    const auto& model = doc.at("model");
    require_keys(model, {"layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size",
                         "positional"},
                 "config.model");
    cfg.model.num_layers = get_or<std::size_t>(model, "layers", 6, "config.model");
    cfg.model.hidden_dim = get_or<std::size_t>(model, "hidden_dim", 32, "config.model");
    cfg.model.num_heads = get_or<std::size_t>(model, "num_heads", 4, "config.model");
    cfg.model.ffn_dim = get_or<std::size_t>(model, "ffn_dim", 64, "config.model");
    cfg.model.vocab_size = get_or<std::size_t>(model, "vocab_size", 97, "config.model");
    const auto positional =
        get_or<std::string>(model, "positional", "sinusoidal", "config.model");
    if (positional == "sinusoidal") {
        cfg.model.positional = engine::PositionalEncoding::kSinusoidal;
    } else if (positional == "none") {
        cfg.model.positional = engine::PositionalEncoding::kNone;
    } else {
        throw ConfigError("config.model.positional: must be 'sinusoidal' or 'none'");
    }
    cfg.model.seed = cfg.seed;

    if (doc.contains("stream")) {
        const auto& stream = doc.at("stream");
        require_keys(stream, {"kind", "n_system", "n_vision", "n_instruction",
                              "designated_layer"},
                     "config.stream");
        cfg.stream.kind = get_or<std::string>(stream, "kind", "random", "config.stream");
        cfg.stream.n_system = get_or<std::size_t>(stream, "n_system", 2, "config.stream");
        cfg.stream.n_vision = get_or<std::size_t>(stream, "n_vision", 8, "config.stream");
        cfg.stream.n_instruction =
            get_or<std::size_t>(stream, "n_instruction", 4, "config.stream");
        cfg.stream.designated_layer =
            get_or<std::size_t>(stream, "designated_layer", 0, "config.stream");
        const std::set<std::string> kinds{"random", "engineered-sink", "critical-token",
                                          "vision-dead-after-l", "uniform"};
        if (kinds.count(cfg.stream.kind) == 0) {
            throw ConfigError("config.stream.kind: unknown kind '" + cfg.stream.kind + "'");
        }
    }

    if (doc.contains("prune")) {
        const auto& prune = doc.at("prune");
        require_keys(prune,
                     {"enabled", "merge_layer", "probe_start_layer", "theta_cos", "theta_l2",
                      "exit_patience", "selector", "baseline_top_k", "merge_enabled",
                      "shallow_skip_enabled", "detection_enabled", "merge_target_offset"},
                     "config.prune");
        cfg.prune_enabled = get_or<bool>(prune, "enabled", true, "config.prune");
        cfg.prune.merge_layer = get_or<std::size_t>(prune, "merge_layer", 1, "config.prune");
        cfg.prune.probe_start_layer =
            get_or<std::size_t>(prune, "probe_start_layer", 2, "config.prune");
        cfg.prune.theta_cos = get_or<double>(prune, "theta_cos", 0.995, "config.prune");
        cfg.prune.theta_l2 = get_or<double>(prune, "theta_l2", 0.2, "config.prune");
        cfg.prune.exit_patience =
            get_or<std::size_t>(prune, "exit_patience", 2, "config.prune");
        cfg.prune.baseline_top_k =
            get_or<std::size_t>(prune, "baseline_top_k", 10, "config.prune");
        cfg.prune.merge_enabled = get_or<bool>(prune, "merge_enabled", true, "config.prune");
        cfg.prune.shallow_skip_enabled =
            get_or<bool>(prune, "shallow_skip_enabled", true, "config.prune");
        cfg.prune.detection_enabled =
            get_or<bool>(prune, "detection_enabled", true, "config.prune");
        cfg.prune.merge_target_offset =
            get_or<std::size_t>(prune, "merge_target_offset", 0, "config.prune");
        const auto selector =
            get_or<std::string>(prune, "selector", "value-aware", "config.prune");
        if (selector == "value-aware") {
            cfg.prune.selector = pruner::Selector::kValueAware;
        } else if (selector == "attn-last") {
            cfg.prune.selector = pruner::Selector::kAttnLast;
        } else if (selector == "attn-text") {
            cfg.prune.selector = pruner::Selector::kAttnText;
        } else if (selector == "attn-vis") {
            cfg.prune.selector = pruner::Selector::kAttnVis;
        } else {
            throw ConfigError("config.prune.selector: unknown selector '" + selector + "'");
        }
    }

    if (doc.contains("probes")) {
        if (!doc.at("probes").is_array()) {
            throw ConfigError("config.probes: expected an array");
        }
        std::size_t index = 0;
        for (const auto& p : doc.at("probes")) {
            const std::string where = "config.probes[" + std::to_string(index++) + "]";
            require_keys(p, {"kind", "layers", "mode", "fraction", "which", "criterion",
                             "side", "layer", "head", "top_n", "softmax"},
                         where);
            ProbeSpec spec;
            spec.kind = get_or<std::string>(p, "kind", "", where);
            spec.layers = get_or<std::vector<std::size_t>>(p, "layers", {}, where);
            spec.mode = get_or<std::string>(p, "mode", "C", where);
            spec.fraction = get_or<double>(p, "fraction", 0.1, where);
            spec.which = get_or<std::string>(p, "which", "top", where);
            spec.criterion = get_or<std::string>(p, "criterion", "attn-last", where);
            spec.side = get_or<std::string>(p, "side", "left", where);
            spec.layer = get_or<std::size_t>(p, "layer", 1, where);
            spec.head = get_or<std::size_t>(p, "head", 0, where);
            spec.top_n = get_or<std::size_t>(p, "top_n", 10, where);
            spec.softmax = get_or<bool>(p, "softmax", false, where);
            const std::set<std::string> kinds{"knockout", "mask-attended", "mask-half",
                                              "logit-lens", "vo-projection", "sink-stats"};
            if (kinds.count(spec.kind) == 0) {
                throw ConfigError(where + ".kind: unknown probe kind '" + spec.kind + "'");
            }
            cfg.probes.push_back(std::move(spec));
        }
    }

    if (doc.contains("cost")) {
        const auto& c = doc.at("cost");
        require_keys(c, {"conventions"}, "config.cost");
        if (c.contains("conventions")) {
            cfg.cost_paper = false;
            cfg.cost_mac = false;
            for (const auto& conv : c.at("conventions")) {
                std::string name;
                try {
                    name = conv.get<std::string>();
                } catch (const json::exception&) {
                    throw ConfigError("config.cost.conventions: expected strings");
                }
                if (name == "paper") {
                    cfg.cost_paper = true;
                } else if (name == "mac") {
                    cfg.cost_mac = true;
                } else {
                    throw ConfigError("config.cost.conventions: unknown convention '" + name +
                                      "'");
                }
            }
        }
    }

    if (doc.contains("output")) {
        const auto& o = doc.at("output");
        require_keys(o, {"full_matrices"}, "config.output");
        cfg.full_matrices = get_or<bool>(o, "full_matrices", false, "config.output");
    }
    return cfg;
}

json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file: " + path);
    }
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return doc;
}

struct BuiltInputs {
    engine::Model model;
    engine::TokenStream stream;
    std::optional<fixtures::FixtureFacts> facts;
};

BuiltInputs build_inputs(const RunConfig& cfg) {
    BuiltInputs built{engine::Model{}, engine::TokenStream{}, std::nullopt};
    if (cfg.stream.kind == "random") {
        built.model = engine::init_model(cfg.model);
        Rng rng(cfg.seed ^ 0x53545245414dull);
        built.stream = engine::random_stream(cfg.model, cfg.stream.n_system,
                                             cfg.stream.n_vision, cfg.stream.n_instruction,
                                             rng);
        return built;
    }
    fixtures::FixtureOptions options;
    options.n_system = cfg.stream.n_system;
    options.n_vision = cfg.stream.n_vision;
    options.n_instruction = cfg.stream.n_instruction;
    options.designated_layer = cfg.stream.designated_layer;
    auto fix = fixtures::build_fixture(cfg.stream.kind, cfg.model, options);
    built.model = std::move(fix.model);
    built.stream = std::move(fix.stream);
    built.facts = fix.facts;
    return built;
}

json facts_json(const fixtures::FixtureFacts& facts) {
    return json{{"kind", fixtures::fixture_kind_name(facts.kind)},
                {"designated_position", facts.designated_position},
                {"designated_layer", facts.designated_layer},
                {"expected_filtering_layer", facts.expected_filtering_layer},
                {"expected_exit_layer", facts.expected_exit_layer},
                {"sink_last_row_mass", facts.sink_last_row_mass},
                {"sink_value_l1", facts.sink_value_l1},
                {"designated_l2", facts.designated_l2},
                {"designated_cosine", facts.designated_cosine},
                {"vision_identical", facts.vision_identical},
                {"argmax_flips_under_knockout", facts.argmax_flips_under_knockout}};
}

std::size_t argmax_of(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) {
            best = i;
        }
    }
    return best;
}

// ------------------------------------------------------------- commands --

int cmd_run(const std::string& config_path, const std::string& out_flag,
            std::optional<std::uint64_t> seed_override) {
    const json doc = load_config_file(config_path);
    auto cfg = parse_run_config(doc);
    if (seed_override.has_value()) {
        cfg.seed = *seed_override;
        cfg.model.seed = *seed_override;
        cfg.echo["seed"] = *seed_override;
    }

    // Everything that can reject the configuration runs before any file is
    // created, so a failed run leaves no output behind.
    cfg.model.validate();
    cfg.prune.validate();
    const auto built = build_inputs(cfg);

    OutputDir out{resolve_out_dir(out_flag), {}};

    json summary;
    summary["schema"] = "visipruner/summary/v1";
    summary["config"] = cfg.echo;

    json facts;
    if (built.facts.has_value()) {
        facts["fixture"] = facts_json(*built.facts);
    }

    engine::PrefillOptions dense_options;
    kernels::MacCounter dense_counter;
    dense_options.counter = &dense_counter;
    const auto dense = engine::prefill(built.model, built.stream, dense_options);
    facts["dense"] = json{{"argmax", argmax_of(dense.logits)},
                          {"logit_l2", kernels::l2_norm(dense.logits)},
                          {"sequence_length", built.stream.size()}};

    json judgments;
    std::optional<pruner::ScheduleRunResult> pruned;
    kernels::MacCounter pruned_counter;
    if (cfg.prune_enabled) {
        pruner::ScheduleRunOptions options;
        options.counter = &pruned_counter;
        pruned = pruner::apply_schedule(built.model, built.stream, cfg.prune, options);
    }

    out.prepare();
    if (pruned.has_value()) {
        out.write("schedule.json", report::schedule_json(pruned->schedule) + "\n");
        out.write("influences.json", report::influence_sweep_json(pruned->probe_records) + "\n");

        double max_abs = 0.0;
        double l2 = 0.0;
        for (std::size_t i = 0; i < dense.logits.size(); ++i) {
            const double diff = std::fabs(dense.logits[i] - pruned->logits[i]);
            max_abs = std::max(max_abs, diff);
            l2 += diff * diff;
        }
        l2 = std::sqrt(l2);
        const bool argmax_agrees = argmax_of(dense.logits) == argmax_of(pruned->logits);
        json sched_facts;
        sched_facts["filtering_layer"] = pruned->schedule.filtering_layer.has_value()
                                             ? json(*pruned->schedule.filtering_layer)
                                             : json(nullptr);
        sched_facts["exit_layer"] = pruned->schedule.exit_layer.has_value()
                                        ? json(*pruned->schedule.exit_layer)
                                        : json(nullptr);
        sched_facts["retained_positions"] = pruned->schedule.retained;
        sched_facts["fallback_dense"] = pruned->schedule.fallback_dense;
        facts["pruned"] = json{{"schedule", sched_facts},
                               {"logit_delta_max_abs", max_abs},
                               {"logit_delta_l2", l2},
                               {"argmax", argmax_of(pruned->logits)},
                               {"argmax_agrees", argmax_agrees},
                               {"final_sequence_length", pruned->final_sequence_length}};
        judgments["logit_delta_tolerance"] = 1e-5;
        judgments["pruned_within_tolerance"] = max_abs <= 1e-5;
        judgments["argmax_agrees"] = argmax_agrees;
    }

    const cost::MacModelInput mac_input{cfg.model.hidden_dim, cfg.model.ffn_dim,
                                        cfg.model.vocab_size, built.stream.n_text(),
                                        built.stream.n_vision()};
    if (cfg.cost_mac) {
        report::MacConventionReport mac;
        mac.dense = cost::mac_dense_prefill(mac_input, cfg.model.num_layers);
        mac.dense_reconciliation = cost::reconcile(mac.dense, dense_counter);
        mac.reconciled = true;
        if (pruned.has_value()) {
            mac.pruned = cost::mac_schedule_prefill(mac_input, pruned->schedule);
            mac.pruned_reconciliation = cost::reconcile(mac.pruned, pruned_counter);
        } else {
            mac.pruned = mac.dense;
            mac.pruned_reconciliation = mac.dense_reconciliation;
        }
        if (!mac.dense_reconciliation.exact || !mac.pruned_reconciliation.exact) {
            throw InvariantViolation(
                "mac-convention totals do not match the instrumented counter");
        }
        out.write("flops_mac.json", report::mac_flops_json(mac) + "\n");
        facts["cost_mac"] = json{{"dense_macs", mac.dense.total()},
                                 {"pruned_macs", mac.pruned.total()},
                                 {"reconciled_exactly", true}};
    }
    if (cfg.cost_paper) {
        cost::CostParams params;
        params.num_layers = cfg.model.num_layers;
        params.hidden_dim = cfg.model.hidden_dim;
        params.ffn_dim = cfg.model.ffn_dim;
        params.n_vision = built.stream.n_vision();
        params.n_text = built.stream.n_text();
        params.vocab_size = cfg.model.vocab_size;
        if (pruned.has_value()) {
            const auto& sched = pruned->schedule;
            const std::size_t lf = sched.filtering_layer.value_or(cfg.model.num_layers + 1);
            const std::size_t exit = sched.exit_layer.value_or(cfg.model.num_layers + 1);
            params.schedule.shallow_layers = std::min(lf, cfg.model.num_layers + 1) - 1;
            params.schedule.middle_layers = exit > lf ? exit - lf : 0;
            params.schedule.retained = sched.retained.size();
            params.schedule.filtering_layer = sched.filtering_layer.value_or(0);
            params.schedule.exit_layer = sched.exit_layer.value_or(0);
        } else {
            params.schedule.middle_layers = cfg.model.num_layers;
            params.schedule.retained = params.n_vision;
            params.schedule.filtering_layer = 1;
        }
        out.write("flops_paper.json",
                  report::paper_flops_json(cost::paper_flops(params)) + "\n");
    }

    std::vector<probes::MaskProbeReport> series;
    json probe_facts = json::array();
    for (std::size_t i = 0; i < cfg.probes.size(); ++i) {
        const auto& spec = cfg.probes[i];
        const std::string stem = "probe_" + std::to_string(i) + "_" + spec.kind;
        if (spec.kind == "knockout") {
            if (spec.mode != "C" && spec.mode != "C&V") {
                throw ConfigError("knockout probe mode must be 'C' or 'C&V'");
            }
            const auto mode = spec.mode == "C&V" ? probes::KnockoutMode::kCrossAndVision
                                                 : probes::KnockoutMode::kCross;
            const auto r =
                probes::knockout_cross_attention(built.model, built.stream, spec.layers, mode);
            out.write(stem + ".json", report::mask_probe_json(r) + "\n");
            probe_facts.push_back(json{{"kind", r.kind},
                                       {"delta_max_abs", r.delta.max_abs},
                                       {"argmax_changed", r.delta.argmax_changed}});
            series.push_back(r);
        } else if (spec.kind == "mask-attended") {
            const auto which =
                spec.which == "bottom" ? probes::MaskWhich::kBottom : probes::MaskWhich::kTop;
            probes::MaskCriterion criterion = probes::MaskCriterion::kAttnLast;
            if (spec.criterion == "attn-text") {
                criterion = probes::MaskCriterion::kAttnText;
            } else if (spec.criterion == "pos-near-text") {
                criterion = probes::MaskCriterion::kPosNearText;
            } else if (spec.criterion != "attn-last") {
                throw ConfigError("mask-attended criterion must be attn-last, attn-text or "
                                  "pos-near-text");
            }
            const auto r = probes::mask_attended_tokens(built.model, built.stream, spec.layers,
                                                        spec.fraction, which, criterion);
            out.write(stem + ".json", report::mask_probe_json(r) + "\n");
            probe_facts.push_back(json{{"kind", r.kind},
                                       {"delta_max_abs", r.delta.max_abs},
                                       {"argmax_changed", r.delta.argmax_changed}});
            series.push_back(r);
        } else if (spec.kind == "mask-half") {
            const auto side =
                spec.side == "right" ? probes::MaskSide::kRight : probes::MaskSide::kLeft;
            const auto r = probes::mask_half(built.model, built.stream, spec.layers, side);
            out.write(stem + ".json", report::mask_probe_json(r) + "\n");
            probe_facts.push_back(json{{"kind", r.kind},
                                       {"delta_max_abs", r.delta.max_abs},
                                       {"argmax_changed", r.delta.argmax_changed}});
            series.push_back(r);
        } else {
            // Trace-based probes share one traced dense run.
            if (spec.layer < 1 || spec.layer > cfg.model.num_layers) {
                throw ConfigError(spec.kind + " probe layer out of range");
            }
            engine::PrefillOptions traced;
            traced.capture_traces = true;
            const auto run = engine::prefill(built.model, built.stream, traced);
            const auto& trace = run.traces[spec.layer - 1];
            if (spec.kind == "logit-lens") {
                const auto lens = probes::logit_lens(
                    built.model, trace.hidden_out.row(trace.hidden_out.rows - 1), spec.top_n);
                out.write(stem + ".json", report::lens_json(lens) + "\n");
                probe_facts.push_back(
                    json{{"kind", "logit-lens"},
                         {"layer", spec.layer},
                         {"top_id",
                          lens.top_ids.empty() ? json(nullptr) : json(lens.top_ids[0])}});
            } else if (spec.kind == "sink-stats") {
                const auto r = probes::sink_stats(trace);
                out.write(stem + ".json", report::sink_report_json(r) + "\n");
                std::size_t flagged = 0;
                for (const auto& t : r.tokens) {
                    flagged += t.sink_flag ? 1 : 0;
                }
                probe_facts.push_back(
                    json{{"kind", "sink-stats"}, {"layer", spec.layer}, {"flagged", flagged}});
            } else {  // vo-projection
                if (spec.head >= cfg.model.num_heads) {
                    throw ConfigError("vo-projection head out of range");
                }
                const std::size_t last = trace.col_positions.size() - 1;
                std::vector<double> value(cfg.model.head_dim());
                for (std::size_t t = 0; t < value.size(); ++t) {
                    value[t] = trace.values[spec.head].at(last, t);
                }
                const auto vo = probes::vo_projection(built.model, spec.layer, spec.head,
                                                      value, spec.top_n, spec.softmax);
                out.write(stem + ".json",
                          report::vo_projection_json(vo, spec.layer, spec.head) + "\n");
                probe_facts.push_back(json{{"kind", "vo-projection"},
                                           {"layer", spec.layer},
                                           {"head", spec.head},
                                           {"top_id", vo.top_ids.empty()
                                                          ? json(nullptr)
                                                          : json(vo.top_ids[0])}});
            }
        }
    }
    if (!series.empty()) {
        out.write("probes.csv", report::probe_series_csv(series));
    }
    facts["probes"] = std::move(probe_facts);

    summary["facts"] = std::move(facts);
    summary["judgments"] = std::move(judgments);
    out.write("summary.json", summary.dump(2) + "\n");
    std::printf("wrote %zu report files to %s\n", out.written.size(),
                out.dir.string().c_str());
    return 0;
}

int cmd_flops(bool llava_preset, std::size_t layers, std::size_t hidden, std::size_t ffn,
              std::size_t n_vision, std::size_t n_text, std::size_t shallow, std::size_t middle,
              std::size_t retained, std::size_t filtering, std::size_t exit_layer,
              const std::string& convention, const std::string& sweep_spec,
              const std::string& out_flag) {
    cost::CostParams params;
    if (llava_preset) {
        params = cost::llava7b_preset();
    } else {
        params.num_layers = layers;
        params.hidden_dim = hidden;
        params.ffn_dim = ffn;
        params.n_vision = n_vision;
        params.n_text = n_text;
        params.schedule.shallow_layers = shallow;
        params.schedule.middle_layers = middle;
        params.schedule.retained = retained;
        params.schedule.filtering_layer = filtering;
        params.schedule.exit_layer = exit_layer;
    }
    if (convention != "paper" && convention != "mac" && convention != "both") {
        throw ConfigError("--convention must be paper, mac or both");
    }
    if (params.schedule.filtering_layer != 0 &&
        params.schedule.filtering_layer != params.schedule.shallow_layers + 1) {
        throw ConfigError("inconsistent schedule flags: the filtering layer must follow the "
                          "shallow block");
    }
    try {
        params.validate();
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    if (params.n_vision == 0) {
        std::fprintf(stderr, "warning: no vision tokens, reductions are 0 by convention\n");
    }

    OutputDir out{resolve_out_dir(out_flag), {}};
    out.prepare();

    if (convention == "paper" || convention == "both") {
        out.write("flops_paper.json",
                  report::paper_flops_json(cost::paper_flops(params)) + "\n");
    }
    if (convention == "mac" || convention == "both") {
        // Synthesize the runtime schedule the summary describes and replay
        // it: sparse until the exit layer, vision-free from there on.
        pruner::PruneSchedule schedule;
        schedule.params.shallow_skip_enabled = true;
        const std::size_t L = params.num_layers;
        schedule.modes.assign(L, pruner::LayerMode::kDense);
        const std::size_t lf = params.schedule.filtering_layer != 0
                                   ? params.schedule.filtering_layer
                                   : params.schedule.shallow_layers + 1;
        const std::size_t exitl = params.schedule.exit_layer;
        for (std::size_t l = 1; l <= L; ++l) {
            if (l < lf) {
                schedule.modes[l - 1] =
                    l == 1 ? pruner::LayerMode::kMerge : pruner::LayerMode::kSkip;
            } else if (exitl == 0 || l < exitl) {
                schedule.modes[l - 1] = pruner::LayerMode::kSparse;
            } else {
                schedule.modes[l - 1] = pruner::LayerMode::kVisionFree;
            }
        }
        if (lf <= L) {
            schedule.filtering_layer = lf;
        }
        if (exitl != 0 && exitl <= L) {
            schedule.exit_layer = exitl;
        }
        const std::size_t last_probed = exitl != 0 ? std::min(exitl, L) : L;
        for (std::size_t l = 2; l <= last_probed; ++l) {
            schedule.probed_layers.push_back(l);
        }
        schedule.retained.resize(params.schedule.retained);
        for (std::size_t i = 0; i < schedule.retained.size(); ++i) {
            schedule.retained[i] = i;
        }
        const cost::MacModelInput input{params.hidden_dim, params.ffn_dim, params.vocab_size,
                                        params.n_text, params.n_vision};
        report::MacConventionReport mac;
        mac.dense = cost::mac_dense_prefill(input, L);
        mac.pruned = cost::mac_schedule_prefill(input, schedule);
        out.write("flops_mac.json", report::mac_flops_json(mac) + "\n");
    }

    if (!sweep_spec.empty()) {
        std::size_t lo = 0;
        std::size_t hi = 0;
        std::size_t step = 1;
        const auto dots = sweep_spec.find("..");
        if (dots == std::string::npos) {
            throw ConfigError("--sweep expects MIN..MAX[:STEP]");
        }
        try {
            lo = std::stoull(sweep_spec.substr(0, dots));
            std::string rest = sweep_spec.substr(dots + 2);
            const auto colon = rest.find(':');
            if (colon != std::string::npos) {
                step = std::stoull(rest.substr(colon + 1));
                rest = rest.substr(0, colon);
            }
            hi = std::stoull(rest);
        } catch (const std::exception&) {
            throw ConfigError("--sweep expects MIN..MAX[:STEP]");
        }
        if (lo == 0 || hi < lo || step == 0) {
            throw ConfigError("--sweep range is empty or zero-stepped");
        }
        std::vector<std::size_t> lengths;
        for (std::size_t v = lo; v <= hi; v += step) {
            lengths.push_back(v);
        }
        out.write("sweep.csv", report::sweep_csv(cost::sweep_vision_lengths(params, lengths)));
    }
    std::printf("wrote %zu report files to %s\n", out.written.size(),
                out.dir.string().c_str());
    return 0;
}

int cmd_trace(const std::string& config_path, const std::string& out_flag,
              std::optional<std::uint64_t> seed_override,
              const std::vector<std::size_t>& layers, bool full_matrices) {
    const json doc = load_config_file(config_path);
    auto cfg = parse_run_config(doc);
    if (seed_override.has_value()) {
        cfg.seed = *seed_override;
        cfg.model.seed = *seed_override;
    }
    cfg.model.validate();
    for (std::size_t l : layers) {
        if (l < 1 || l > cfg.model.num_layers) {
            throw ConfigError("--layers: layer " + std::to_string(l) + " out of range");
        }
    }
    const auto built = build_inputs(cfg);

    engine::PrefillOptions options;
    options.capture_traces = true;
    const auto run = engine::prefill(built.model, built.stream, options);

    OutputDir out{resolve_out_dir(out_flag), {}};
    out.prepare();
    std::string body;
    for (const auto& trace : run.traces) {
        if (!layers.empty() &&
            std::find(layers.begin(), layers.end(), trace.layer) == layers.end()) {
            continue;
        }
        body += report::trace_record_json(trace, full_matrices || cfg.full_matrices) + "\n";
    }
    out.write("trace.jsonl", body);
    std::printf("wrote %zu report files to %s\n", out.written.size(),
                out.dir.string().c_str());
    return 0;
}

void print_error_record(int code, const char* type, const std::string& message) {
    json record;
    record["error"] = json{{"code", code}, {"type", type}, {"message", message}};
    std::fprintf(stderr, "%s\n", record.dump().c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deterministic multimodal pruning experiments"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed_value = 0;
    bool seed_given = false;

    auto* run = app.add_subcommand("run", "execute a run configuration");
    run->add_option("--config", config_path, "run configuration (JSON)")->required();
    run->add_option("--out", out_dir, "output directory (VISIPRUNER_OUT overrides)");
    run->add_option("--seed", seed_value, "override the config seed")
        ->each([&seed_given](const std::string&) { seed_given = true; });

    auto* flops = app.add_subcommand("flops", "closed-form cost reports");
    bool llava_preset = false;
    std::size_t f_layers = 6;
    std::size_t f_hidden = 32;
    std::size_t f_ffn = 64;
    std::size_t f_nv = 8;
    std::size_t f_nt = 6;
    std::size_t f_shallow = 0;
    std::size_t f_middle = 0;
    std::size_t f_retained = 0;
    std::size_t f_filtering = 0;
    std::size_t f_exit = 0;
    std::string convention = "both";
    std::string sweep_spec;
    flops->add_flag("--llava7b-preset", llava_preset, "use the LLaVA-v1.5-7B shape");
    flops->add_option("--layers", f_layers, "model depth L");
    flops->add_option("--hidden", f_hidden, "hidden width d");
    flops->add_option("--ffn", f_ffn, "FFN width m");
    flops->add_option("--n-vision", f_nv, "vision tokens");
    flops->add_option("--n-text", f_nt, "text tokens");
    flops->add_option("--shallow", f_shallow, "shallow layers keeping vision FFN only");
    flops->add_option("--middle", f_middle, "cross-modal interaction layers L'");
    flops->add_option("--retained", f_retained, "retained vision tokens n_v'");
    flops->add_option("--filtering", f_filtering, "filtering layer (KV accounting)");
    flops->add_option("--exit", f_exit, "vision exit layer (KV accounting)");
    flops->add_option("--convention", convention, "paper, mac or both");
    flops->add_option("--sweep", sweep_spec, "vision-length sweep MIN..MAX[:STEP]");
    flops->add_option("--out", out_dir, "output directory (VISIPRUNER_OUT overrides)");

    auto* trace = app.add_subcommand("trace", "export dense layer traces as JSONL");
    std::vector<std::size_t> trace_layers;
    bool full_matrices = false;
    trace->add_option("--config", config_path, "run configuration (JSON)")->required();
    trace->add_option("--layers", trace_layers, "layers to export (default: all)");
    trace->add_flag("--full-matrices", full_matrices, "include full attention matrices");
    trace->add_option("--out", out_dir, "output directory (VISIPRUNER_OUT overrides)");
    trace->add_option("--seed", seed_value, "override the config seed")
        ->each([&seed_given](const std::string&) { seed_given = true; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);  // --help and friends
        }
        print_error_record(2, "cli", e.what());
        return 2;
    }

    std::optional<std::uint64_t> seed_override;
    if (seed_given) {
        seed_override = seed_value;
    }
    try {
        if (run->parsed()) {
            return cmd_run(config_path, out_dir, seed_override);
        }
        if (flops->parsed()) {
            return cmd_flops(llava_preset, f_layers, f_hidden, f_ffn, f_nv, f_nt, f_shallow,
                             f_middle, f_retained, f_filtering, f_exit, convention, sweep_spec,
                             out_dir);
        }
        if (trace->parsed()) {
            return cmd_trace(config_path, out_dir, seed_override, trace_layers, full_matrices);
        }
    } catch (const ConfigError& e) {
        print_error_record(2, "config", e.what());
        return 2;
    } catch (const InputError& e) {
        print_error_record(2, "config", e.what());
        return 2;
    } catch (const InvariantViolation& e) {
        print_error_record(3, "invariant", e.what());
        return 3;
    } catch (const IoError& e) {
        print_error_record(4, "io", e.what());
        return 4;
    } catch (const std::exception& e) {
        print_error_record(1, "internal", e.what());
        return 1;
    }
    return 0;
}
