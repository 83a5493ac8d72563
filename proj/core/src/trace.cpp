// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include "visipruner/trace.hpp"

#include <string>

#include "visipruner/errors.hpp"

namespace visipruner::engine {

namespace {
std::size_t index_of(const std::vector<std::size_t>& positions, std::size_t position,
                     const char* what) {
    for (std::size_t i = 0; i < positions.size(); ++i) {
        if (positions[i] == position) {
            return i;
        }
    }
    throw InputError(std::string(what) + ": position " + std::to_string(position) +
                     " not present in trace");
}
}  // namespace

std::size_t LayerTrace::col_index(std::size_t position) const {
    return index_of(col_positions, position, "LayerTrace::col_index");
}

std::size_t LayerTrace::row_index(std::size_t position) const {
    return index_of(row_positions, position, "LayerTrace::row_index");
}

double LayerTrace::last_row_mass(std::size_t col) const {
    if (row_positions.empty()) {
        throw InputError("LayerTrace::last_row_mass: no attention rows");
    }
    const std::size_t last = row_positions.size() - 1;
    double mass = 0.0;
    for (const auto& w : weights) {
        mass += w.at(last, col);
    }
    return mass;
}

}  // namespace visipruner::engine
