// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace visipruner::kernels {

// Tally of multiply-accumulate operations executed through matmul.
// Not thread safe: a counter must not be shared across concurrent kernel
// calls; disjoint counters may run in parallel.
class MacCounter {
public:
    void add(std::uint64_t macs) { mac_count_ += macs; }
    void reset() { mac_count_ = 0; }
    std::uint64_t count() const { return mac_count_; }

private:
    std::uint64_t mac_count_ = 0;
};

// Dense row-major matrix of 64-bit reals. The engine works in doubles
// throughout so exact oracles never fight precision.
struct RealMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // rows * cols, row-major

    RealMatrix() = default;
    RealMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool all_finite() const;

    // Throws InvariantViolation if any entry is non-finite.
    void require_finite(const char* context) const;
};

// Exact dense product a*b with fixed left-to-right accumulation over the
// inner dimension, so identical inputs reproduce bit-identical outputs.
// When a counter is given it is incremented by a.rows * a.cols * b.cols.
// Throws ShapeError when a.cols != b.rows.
RealMatrix matmul(const RealMatrix& a, const RealMatrix& b, MacCounter* counter = nullptr);

// Row-vector times matrix: returns x * m (x.size() must equal m.rows).
std::vector<double> vecmat(std::span<const double> x, const RealMatrix& m,
                           MacCounter* counter = nullptr);

// Softmax over the unmasked entries of one score row. Masked entries are
// exactly 0 in the output; unmasked entries are positive and sum to 1
// within 1e-12. Throws DegenerateRowError when every entry is masked;
// the caller decides the policy for that case.
std::vector<double> masked_softmax_row(std::span<const double> scores,
                                       std::span<const std::uint8_t> mask_allow);

struct CosineL2 {
    double cosine = 0.0;
    double l2 = 0.0;
};

// Cosine similarity and L2 distance between two equal-length vectors.
// A zero-norm operand yields cosine 0 by convention: masking a token that
// supplied the entire attention output produces a zero vector, and 0 keeps
// "lower similarity means stronger influence" consistent in that limit.
CosineL2 cosine_and_l2(std::span<const double> u, std::span<const double> v);

double dot(std::span<const double> u, std::span<const double> v);
double l2_norm(std::span<const double> v);
double l1_norm(std::span<const double> v);

// Plain left-to-right sum, the canonical row-mass reading used everywhere.
double sum(std::span<const double> v);

// RMS normalization of one row: x / rms(x) * scale, with rms computed over
// the full width. A zero row stays zero (rms guarded by a tiny epsilon).
std::vector<double> rms_norm(std::span<const double> x, std::span<const double> scale);

double silu(double x);

}  // namespace visipruner::kernels
