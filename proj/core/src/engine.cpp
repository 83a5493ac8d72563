// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include "visipruner/engine.hpp"

#include <cmath>
#include <string>

#include "visipruner/errors.hpp"

namespace visipruner::engine {

using kernels::MacCounter;
using kernels::RealMatrix;

void KvCache::validate() const {
    for (const auto& layer : layers) {
        for (const auto& per_head : layer.keys) {
            if (per_head.size() != layer.entries.size()) {
                throw StateError("KvCache: key rows out of sync with entries");
            }
        }
        for (const auto& per_head : layer.values) {
            if (per_head.size() != layer.entries.size()) {
                throw StateError("KvCache: value rows out of sync with entries");
            }
        }
    }
}

kernels::RealMatrix embed_stream(const Model& model, const TokenStream& stream) {
    stream.validate();
    const std::size_t d = model.config.hidden_dim;
    RealMatrix h(stream.size(), d);
    for (std::size_t i = 0; i < stream.size(); ++i) {
        const auto& e = stream.entries[i];
        if (e.has_embedding) {
            if (e.embedding.size() != d) {
                throw InputError("embed_stream: embedding length mismatch at position " +
                                 std::to_string(i));
            }
            for (std::size_t j = 0; j < d; ++j) {
                h.at(i, j) = e.embedding[j];
            }
        } else {
            if (e.token_id >= model.config.vocab_size) {
                throw InputError("embed_stream: token id out of range at position " +
                                 std::to_string(i));
            }
            for (std::size_t j = 0; j < d; ++j) {
                h.at(i, j) = model.embedding.at(e.token_id, j);
            }
        }
        const auto pe = positional_encoding(model.config, e.position);
        for (std::size_t j = 0; j < d; ++j) {
            h.at(i, j) += pe[j];
        }
    }
    return h;
}

namespace {

RealMatrix head_slice(const RealMatrix& full, std::size_t head, std::size_t head_dim) {
    RealMatrix out(full.rows, head_dim);
    const std::size_t offset = head * head_dim;
    for (std::size_t i = 0; i < full.rows; ++i) {
        for (std::size_t j = 0; j < head_dim; ++j) {
            out.at(i, j) = full.at(i, offset + j);
        }
    }
    return out;
}

RealMatrix transpose(const RealMatrix& m) {
    RealMatrix out(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j) {
            out.at(j, i) = m.at(i, j);
        }
    }
    return out;
}

RealMatrix norm_rows(const RealMatrix& hidden, const std::vector<std::size_t>& rows,
                     const std::vector<double>& scale) {
    RealMatrix out(rows.size(), hidden.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto normed = kernels::rms_norm(hidden.row(rows[i]), scale);
        for (std::size_t j = 0; j < hidden.cols; ++j) {
            out.at(i, j) = normed[j];
        }
    }
    return out;
}

void ffn_in_place(const Model& model, const LayerWeights& lw, RealMatrix& hidden,
                  MacCounter* counter) {
    std::vector<std::size_t> all(hidden.rows);
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }
    RealMatrix x2 = norm_rows(hidden, all, lw.ffn_norm_scale);
    RealMatrix gate = kernels::matmul(x2, lw.w_gate, counter);
    RealMatrix up = kernels::matmul(x2, lw.w_up, counter);
    for (std::size_t i = 0; i < gate.data.size(); ++i) {
        gate.data[i] = kernels::silu(gate.data[i]) * up.data[i];
    }
    RealMatrix down = kernels::matmul(gate, lw.w_down, counter);
    for (std::size_t i = 0; i < hidden.data.size(); ++i) {
        hidden.data[i] += down.data[i];
    }
    (void)model;
}

}  // namespace

std::optional<LayerTrace> layer_forward(const Model& model, RealMatrix& hidden,
                                        const std::vector<std::size_t>& positions,
                                        const std::vector<Modality>& modalities,
                                        const LayerForwardSpec& spec) {
    if (spec.layer < 1 || spec.layer > model.config.num_layers) {
        throw InputError("layer_forward: layer index out of range");
    }
    const auto& lw = model.layers[spec.layer - 1];
    const std::size_t num_heads = model.config.num_heads;
    const std::size_t head_dim = model.config.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(head_dim));

    std::optional<LayerTrace> trace;
    if (spec.capture_trace) {
        trace.emplace();
        trace->layer = spec.layer;
        trace->seq_positions = positions;
        trace->seq_modalities = modalities;
        trace->hidden_in = hidden;
    }

    const auto& rows = spec.attend_rows;
    const auto& cols = spec.key_cols;

    if (!rows.empty() && !cols.empty()) {
        RealMatrix xq = norm_rows(hidden, rows, lw.attn_norm_scale);
        RealMatrix xk = norm_rows(hidden, cols, lw.attn_norm_scale);
        RealMatrix q = kernels::matmul(xq, lw.w_q, spec.counter);
        RealMatrix k = kernels::matmul(xk, lw.w_k, spec.counter);
        RealMatrix v = kernels::matmul(xk, lw.w_v, spec.counter);

        std::vector<RealMatrix> weights(num_heads);
        std::vector<RealMatrix> values(num_heads);
        for (std::size_t h = 0; h < num_heads; ++h) {
            RealMatrix qh = head_slice(q, h, head_dim);
            RealMatrix kht = transpose(head_slice(k, h, head_dim));
            RealMatrix scores = kernels::matmul(qh, kht, spec.counter);
            for (double& s : scores.data) {
                s *= inv_sqrt_dk;
            }
            weights[h] = std::move(scores);  // softmax applied row-wise below
            values[h] = head_slice(v, h, head_dim);
        }

        for (std::size_t i = 0; i < rows.size(); ++i) {
            const std::size_t row_pos = positions[rows[i]];
            const Modality row_mod = modalities[rows[i]];
            std::vector<std::uint8_t> allow(cols.size(), 0);
            bool any = false;
            for (std::size_t j = 0; j < cols.size(); ++j) {
                const std::size_t col_pos = positions[cols[j]];
                bool ok = col_pos <= row_pos;
                if (ok && spec.hooks != nullptr && spec.hooks->allow) {
                    ok = spec.hooks->allow(spec.layer, row_pos, row_mod, col_pos,
                                           modalities[cols[j]]);
                }
                allow[j] = ok ? 1 : 0;
                any = any || ok;
            }
            if (!any) {
                if (!spec.zero_output_on_degenerate) {
                    throw DegenerateRowError("layer_forward: row at position " +
                                             std::to_string(row_pos) +
                                             " has every attention column masked");
                }
                if (spec.degenerate_rows != nullptr) {
                    ++(*spec.degenerate_rows);
                }
                for (std::size_t h = 0; h < num_heads; ++h) {
                    for (std::size_t j = 0; j < cols.size(); ++j) {
                        weights[h].at(i, j) = 0.0;
                    }
                }
                continue;
            }
            for (std::size_t h = 0; h < num_heads; ++h) {
                const auto soft = kernels::masked_softmax_row(weights[h].row(i), allow);
                for (std::size_t j = 0; j < cols.size(); ++j) {
                    weights[h].at(i, j) = soft[j];
                }
            }
        }

        if (spec.hooks != nullptr && spec.hooks->reweight) {
            std::vector<std::size_t> col_positions(cols.size());
            std::vector<Modality> col_mods(cols.size());
            for (std::size_t j = 0; j < cols.size(); ++j) {
                col_positions[j] = positions[cols[j]];
                col_mods[j] = modalities[cols[j]];
            }
            for (std::size_t h = 0; h < num_heads; ++h) {
                for (std::size_t i = 0; i < rows.size(); ++i) {
                    spec.hooks->reweight(spec.layer, h, positions[rows[i]], modalities[rows[i]],
                                         weights[h].row(i), col_positions, col_mods);
                }
            }
        }

        RealMatrix attn(rows.size(), model.config.hidden_dim);
        for (std::size_t h = 0; h < num_heads; ++h) {
            RealMatrix ah = kernels::matmul(weights[h], values[h], spec.counter);
            const std::size_t offset = h * head_dim;
            for (std::size_t i = 0; i < rows.size(); ++i) {
                for (std::size_t j = 0; j < head_dim; ++j) {
                    attn.at(i, offset + j) = ah.at(i, j);
                }
            }
        }
        RealMatrix out = kernels::matmul(attn, lw.w_o, spec.counter);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t j = 0; j < model.config.hidden_dim; ++j) {
                hidden.at(rows[i], j) += out.at(i, j);
            }
        }

        if (spec.cache != nullptr) {
            auto& layer_cache = spec.cache->layers[spec.layer - 1];
            for (std::size_t j = 0; j < cols.size(); ++j) {
                layer_cache.entries.push_back({positions[cols[j]], modalities[cols[j]]});
                for (std::size_t h = 0; h < num_heads; ++h) {
                    std::vector<double> krow(head_dim);
                    std::vector<double> vrow(head_dim);
                    for (std::size_t t = 0; t < head_dim; ++t) {
                        krow[t] = k.at(j, h * head_dim + t);
                        vrow[t] = v.at(j, h * head_dim + t);
                    }
                    layer_cache.keys[h].push_back(std::move(krow));
                    layer_cache.values[h].push_back(std::move(vrow));
                }
            }
        }

        if (trace.has_value()) {
            trace->row_positions.resize(rows.size());
            trace->row_modalities.resize(rows.size());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                trace->row_positions[i] = positions[rows[i]];
                trace->row_modalities[i] = modalities[rows[i]];
            }
            trace->col_positions.resize(cols.size());
            trace->col_modalities.resize(cols.size());
            for (std::size_t j = 0; j < cols.size(); ++j) {
                trace->col_positions[j] = positions[cols[j]];
                trace->col_modalities[j] = modalities[cols[j]];
            }
            trace->weights = weights;
            trace->values = values;
            trace->attn_output = attn;
            trace->value_l1.assign(cols.size(), 0.0);
            for (std::size_t j = 0; j < cols.size(); ++j) {
                double acc = 0.0;
                for (std::size_t h = 0; h < num_heads; ++h) {
                    acc += kernels::l1_norm(values[h].row(j));
                }
                trace->value_l1[j] = acc;
            }
        }
    }

    ffn_in_place(model, lw, hidden, spec.counter);

    if (trace.has_value()) {
        trace->hidden_out = hidden;
    }
    return trace;
}

ProbeRow probe_last_row(const Model& model, const RealMatrix& hidden,
                        const std::vector<std::size_t>& positions,
                        const std::vector<Modality>& modalities, std::size_t layer,
                        MacCounter* counter) {
    if (layer < 1 || layer > model.config.num_layers) {
        throw InputError("probe_last_row: layer index out of range");
    }
    if (hidden.rows == 0) {
        throw InputError("probe_last_row: empty sequence");
    }
    const auto& lw = model.layers[layer - 1];
    const std::size_t n = hidden.rows;
    const std::size_t num_heads = model.config.num_heads;
    const std::size_t head_dim = model.config.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(head_dim));

    const auto q_in = kernels::rms_norm(hidden.row(n - 1), lw.attn_norm_scale);
    const auto q = kernels::vecmat(q_in, lw.w_q, counter);

    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) {
        all[i] = i;
    }
    RealMatrix xk = norm_rows(hidden, all, lw.attn_norm_scale);
    RealMatrix k = kernels::matmul(xk, lw.w_k, counter);
    RealMatrix v = kernels::matmul(xk, lw.w_v, counter);

    ProbeRow probe;
    probe.col_positions = positions;
    probe.col_modalities = modalities;
    probe.weights.resize(num_heads);
    probe.values.resize(num_heads);
    probe.attn_output.assign(model.config.hidden_dim, 0.0);

    std::vector<std::uint8_t> allow(n, 1);  // last row sees every position
    for (std::size_t h = 0; h < num_heads; ++h) {
        RealMatrix qh(1, head_dim);
        for (std::size_t t = 0; t < head_dim; ++t) {
            qh.at(0, t) = q[h * head_dim + t];
        }
        RealMatrix kht = transpose(head_slice(k, h, head_dim));
        RealMatrix scores = kernels::matmul(qh, kht, counter);
        for (double& s : scores.data) {
            s *= inv_sqrt_dk;
        }
        probe.weights[h] = kernels::masked_softmax_row(scores.row(0), allow);
        probe.values[h] = head_slice(v, h, head_dim);

        RealMatrix wrow(1, n);
        for (std::size_t j = 0; j < n; ++j) {
            wrow.at(0, j) = probe.weights[h][j];
        }
        RealMatrix oh = kernels::matmul(wrow, probe.values[h], counter);
        for (std::size_t t = 0; t < head_dim; ++t) {
            probe.attn_output[h * head_dim + t] = oh.at(0, t);
        }
    }
    return probe;
}

PrefillResult prefill(const Model& model, const TokenStream& stream,
                      const PrefillOptions& options) {
    stream.validate();
    const std::size_t n = stream.size();
    RealMatrix hidden = embed_stream(model, stream);

    std::vector<std::size_t> positions(n);
    std::vector<Modality> modalities(n);
    for (std::size_t i = 0; i < n; ++i) {
        positions[i] = stream.entries[i].position;
        modalities[i] = stream.entries[i].modality;
    }
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) {
        all[i] = i;
    }

    PrefillResult result;
    result.cache.layers.resize(model.config.num_layers);
    for (auto& layer : result.cache.layers) {
        layer.keys.resize(model.config.num_heads);
        layer.values.resize(model.config.num_heads);
    }

    for (std::size_t layer = 1; layer <= model.config.num_layers; ++layer) {
        LayerForwardSpec spec;
        spec.layer = layer;
        spec.attend_rows = all;
        spec.key_cols = all;
        spec.hooks = &options.hooks;
        spec.zero_output_on_degenerate = options.zero_output_on_degenerate;
        spec.capture_trace = options.capture_traces;
        spec.counter = options.counter;
        spec.cache = &result.cache;
        spec.degenerate_rows = &result.degenerate_rows;
        auto trace = layer_forward(model, hidden, positions, modalities, spec);
        if (trace.has_value()) {
            result.traces.push_back(std::move(*trace));
        }
    }

    result.logits = unembed(model, hidden.row(n - 1), options.counter);
    result.cache.next_position = n;
    return result;
}

std::vector<double> decode_step(const Model& model, KvCache& cache, const DecodeInput& input,
                                std::size_t position, MacCounter* counter) {
    if (cache.num_layers() != model.config.num_layers) {
        throw StateError("decode_step: cache layer count does not match model");
    }
    cache.validate();
    if (position != cache.next_position) {
        throw StateError("decode_step: stale cache, expected position " +
                         std::to_string(cache.next_position) + " but got " +
                         std::to_string(position));
    }
    const std::size_t d = model.config.hidden_dim;
    const std::size_t num_heads = model.config.num_heads;
    const std::size_t head_dim = model.config.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(head_dim));

    std::vector<double> h(d, 0.0);
    if (input.has_embedding) {
        if (input.embedding.size() != d) {
            throw InputError("decode_step: embedding length mismatch");
        }
        h = input.embedding;
    } else {
        if (input.token_id >= model.config.vocab_size) {
            throw InputError("decode_step: token id out of range");
        }
        for (std::size_t j = 0; j < d; ++j) {
            h[j] = model.embedding.at(input.token_id, j);
        }
    }
    const auto pe = positional_encoding(model.config, position);
    for (std::size_t j = 0; j < d; ++j) {
        h[j] += pe[j];
    }

    for (std::size_t layer = 1; layer <= model.config.num_layers; ++layer) {
        const auto& lw = model.layers[layer - 1];
        auto& layer_cache = cache.layers[layer - 1];

        const auto xn = kernels::rms_norm(h, lw.attn_norm_scale);
        const auto q = kernels::vecmat(xn, lw.w_q, counter);
        const auto k = kernels::vecmat(xn, lw.w_k, counter);
        const auto v = kernels::vecmat(xn, lw.w_v, counter);

        layer_cache.entries.push_back({position, input.modality});
        for (std::size_t hd = 0; hd < num_heads; ++hd) {
            layer_cache.keys[hd].emplace_back(k.begin() + hd * head_dim,
                                              k.begin() + (hd + 1) * head_dim);
            layer_cache.values[hd].emplace_back(v.begin() + hd * head_dim,
                                                v.begin() + (hd + 1) * head_dim);
        }

        const std::size_t len = layer_cache.length();
        std::vector<double> attn(d, 0.0);
        std::vector<std::uint8_t> allow(len, 1);
        for (std::size_t hd = 0; hd < num_heads; ++hd) {
            RealMatrix qh(1, head_dim);
            for (std::size_t t = 0; t < head_dim; ++t) {
                qh.at(0, t) = q[hd * head_dim + t];
            }
            RealMatrix kht(head_dim, len);
            RealMatrix vh(len, head_dim);
            for (std::size_t r = 0; r < len; ++r) {
                for (std::size_t t = 0; t < head_dim; ++t) {
                    kht.at(t, r) = layer_cache.keys[hd][r][t];
                    vh.at(r, t) = layer_cache.values[hd][r][t];
                }
            }
            RealMatrix scores = kernels::matmul(qh, kht, counter);
            for (double& s : scores.data) {
                s *= inv_sqrt_dk;
            }
            const auto w = kernels::masked_softmax_row(scores.row(0), allow);
            RealMatrix wrow(1, len);
            for (std::size_t r = 0; r < len; ++r) {
                wrow.at(0, r) = w[r];
            }
            RealMatrix oh = kernels::matmul(wrow, vh, counter);
            for (std::size_t t = 0; t < head_dim; ++t) {
                attn[hd * head_dim + t] = oh.at(0, t);
            }
        }
        const auto out = kernels::vecmat(attn, lw.w_o, counter);
        for (std::size_t j = 0; j < d; ++j) {
            h[j] += out[j];
        }

        const auto x2 = kernels::rms_norm(h, lw.ffn_norm_scale);
        auto gate = kernels::vecmat(x2, lw.w_gate, counter);
        const auto up = kernels::vecmat(x2, lw.w_up, counter);
        for (std::size_t j = 0; j < gate.size(); ++j) {
            gate[j] = kernels::silu(gate[j]) * up[j];
        }
        const auto down = kernels::vecmat(gate, lw.w_down, counter);
        for (std::size_t j = 0; j < d; ++j) {
            h[j] += down[j];
        }
    }

    cache.next_position = position + 1;
    return unembed(model, h, counter);
}

std::vector<double> unembed(const Model& model, std::span<const double> hidden,
                            MacCounter* counter) {
    if (hidden.size() != model.config.hidden_dim) {
        throw ShapeError("unembed: hidden length mismatch");
    }
    RealMatrix hcol(model.config.hidden_dim, 1);
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        hcol.at(i, 0) = hidden[i];
    }
    RealMatrix out = kernels::matmul(model.unembedding, hcol, counter);
    return out.data;
}

}  // namespace visipruner::engine
