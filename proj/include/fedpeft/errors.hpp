// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <stdexcept>
#include <string>

namespace fedpeft {

/// Operand dimensions do not line up.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite values, failed convergence, or similar numerical breakdown.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid model, adapter, or experiment configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Federated protocol violation (hash mismatch, inconsistent updates, bad weights).
class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training diverged (non-finite or exploding loss).
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File or stream problems, including malformed binary payloads.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace fedpeft
