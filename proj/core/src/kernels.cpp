// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#include "visipruner/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "visipruner/errors.hpp"

namespace visipruner::kernels {

bool RealMatrix::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

void RealMatrix::require_finite(const char* context) const {
    if (!all_finite()) {
        throw InvariantViolation(std::string("non-finite entry in matrix: ") + context);
    }
}

RealMatrix matmul(const RealMatrix& a, const RealMatrix& b, MacCounter* counter) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols) + " vs " +
                         std::to_string(b.rows) + ")");
    }
    RealMatrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        double* orow = out.data.data() + i * b.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    if (counter != nullptr) {
        counter->add(static_cast<std::uint64_t>(a.rows) * a.cols * b.cols);
    }
    return out;
}

std::vector<double> vecmat(std::span<const double> x, const RealMatrix& m, MacCounter* counter) {
    if (x.size() != m.rows) {
        throw ShapeError("vecmat: vector length " + std::to_string(x.size()) +
                         " does not match matrix rows " + std::to_string(m.rows));
    }
    std::vector<double> out(m.cols, 0.0);
    for (std::size_t k = 0; k < m.rows; ++k) {
        const double xk = x[k];
        const double* mrow = m.data.data() + k * m.cols;
        for (std::size_t j = 0; j < m.cols; ++j) {
            out[j] += xk * mrow[j];
        }
    }
    if (counter != nullptr) {
        counter->add(static_cast<std::uint64_t>(m.rows) * m.cols);
    }
    return out;
}

std::vector<double> masked_softmax_row(std::span<const double> scores,
                                       std::span<const std::uint8_t> mask_allow) {
    if (scores.size() != mask_allow.size()) {
        throw ShapeError("masked_softmax_row: scores and mask lengths differ");
    }
    double max_score = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (mask_allow[j] != 0) {
            any = true;
            max_score = std::max(max_score, scores[j]);
        }
    }
    if (!any) {
        throw DegenerateRowError("masked_softmax_row: every entry masked");
    }
    std::vector<double> out(scores.size(), 0.0);
    double denom = 0.0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (mask_allow[j] != 0) {
            out[j] = std::exp(scores[j] - max_score);
            denom += out[j];
        }
    }
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (mask_allow[j] != 0) {
            out[j] /= denom;
        }
    }
    return out;
}

double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw ShapeError("dot: lengths differ");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        acc += u[i] * v[i];
    }
    return acc;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double l1_norm(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) {
        acc += std::fabs(x);
    }
    return acc;
}

double sum(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) {
        acc += x;
    }
    return acc;
}

CosineL2 cosine_and_l2(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw ShapeError("cosine_and_l2: lengths differ");
    }
    CosineL2 r;
    const double nu = l2_norm(u);
    const double nv = l2_norm(v);
    if (nu == 0.0 || nv == 0.0) {
        r.cosine = 0.0;
    } else {
        r.cosine = dot(u, v) / (nu * nv);
        r.cosine = std::clamp(r.cosine, -1.0, 1.0);
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double d = u[i] - v[i];
        acc += d * d;
    }
    r.l2 = std::sqrt(acc);
    return r;
}

std::vector<double> rms_norm(std::span<const double> x, std::span<const double> scale) {
    if (x.size() != scale.size()) {
        throw ShapeError("rms_norm: vector and scale lengths differ");
    }
    double mean_sq = 0.0;
    for (double v : x) {
        mean_sq += v * v;
    }
    mean_sq /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(mean_sq + 1e-30);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv * scale[i];
    }
    return out;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace visipruner::kernels
