// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "visipruner/kernels.hpp"
#include "visipruner/stream.hpp"

namespace visipruner::engine {

// Everything one layer computed, captured for analysis. Attention rows cover
// the positions that computed attention this layer (a subset of the sequence
// under a pruning schedule); columns cover the key/value positions.
struct LayerTrace {
    std::size_t layer = 0;  // 1-based

    std::vector<std::size_t> row_positions;
    std::vector<Modality> row_modalities;
    std::vector<std::size_t> col_positions;
    std::vector<Modality> col_modalities;

    std::vector<kernels::RealMatrix> weights;  // per head, rows x cols, post-softmax
    std::vector<kernels::RealMatrix> values;   // per head, cols x head_dim
    kernels::RealMatrix attn_output;           // rows x d, concatenated heads, before W_O

    std::vector<std::size_t> seq_positions;  // rows of hidden_in / hidden_out
    std::vector<Modality> seq_modalities;
    kernels::RealMatrix hidden_in;   // sequence x d, layer input
    kernels::RealMatrix hidden_out;  // sequence x d, layer output

    std::vector<double> value_l1;  // per column, L1 of the concatenated value vector

    std::size_t num_heads() const { return weights.size(); }

    // Index of `position` in col_positions; throws InputError if absent.
    std::size_t col_index(std::size_t position) const;
    // Index of `position` in row_positions; throws InputError if absent.
    std::size_t row_index(std::size_t position) const;

    // Attention mass received by column `col` from the last row, summed over heads.
    double last_row_mass(std::size_t col) const;
};

}  // namespace visipruner::engine
