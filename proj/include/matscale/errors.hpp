// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace matscale {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shapes do not line up (e.g. matmul inner dimensions).
struct DimensionError : Error {
    using Error::Error;
};

// A documented precondition was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// Operation invoked in an invalid state (e.g. backward on a consumed graph).
struct StateError : Error {
    using Error::Error;
};

// Numerical failure: singular matrix, non-finite loss, overflow.
struct NumericError : Error {
    using Error::Error;
};

// Invalid configuration value (hyperparameters, CLI-derived settings).
struct ConfigError : Error {
    using Error::Error;
};

// Input value outside its domain (e.g. atomic number beyond the table).
struct DomainError : Error {
    using Error::Error;
};

// Malformed input file. Carries the 1-based line number when known.
struct ParseError : Error {
    explicit ParseError(const std::string& msg, long line_number = 0)
        : Error(line_number > 0 ? "line " + std::to_string(line_number) + ": " + msg : msg),
          line(line_number) {}
    long line;
};

// File system failure (missing file, unwritable path).
struct IoError : Error {
    using Error::Error;
};

} // namespace matscale
