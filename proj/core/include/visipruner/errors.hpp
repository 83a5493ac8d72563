// Copyright (C) 2026 The VisiPruner Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace visipruner {

// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Matrix/vector dimension mismatch.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error(what) {}
};

// Invalid argument on the public surface (bad fixture kind, bad layer index, ...).
class InputError : public Error {
public:
    explicit InputError(const std::string& what) : Error(what) {}
};

// Stateful object misuse (stale KV cache, layer-count mismatch, ...).
class StateError : public Error {
public:
    explicit StateError(const std::string& what) : Error(what) {}
};

// Attempt to measure influence of a future position on a past one.
class CausalityError : public Error {
public:
    explicit CausalityError(const std::string& what) : Error(what) {}
};

// Softmax row with every entry masked. The caller decides the policy.
class DegenerateRowError : public Error {
public:
    explicit DegenerateRowError(const std::string& what) : Error(what) {}
};

// Run configuration failed schema validation.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what) {}
};

// A numerical invariant the library promises was observed broken at runtime.
class InvariantViolation : public Error {
public:
    explicit InvariantViolation(const std::string& what) : Error(what) {}
};

// Filesystem failure while writing or reading report files.
class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(what) {}
};

}  // namespace visipruner
