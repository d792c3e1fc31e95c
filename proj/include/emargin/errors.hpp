#pragma once

#include <stdexcept>
#include <string>

namespace emargin {

// Error taxonomy. Each failure mode carries a message naming the offending
// value (shapes, column, row index, ...) so callers can surface it verbatim.

// Shape/axis disagreement between operands.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Input outside an operation's mathematical domain (empty axis, k > n, ...).
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse (non-scalar backward root, tensor from a different graph, ...).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed cell or row in a text input.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Declared column or field missing from an input.
struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Corrupt or foreign binary file (bad magic, version, truncation).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite value where a finite one is required (gradients, losses).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration value.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem failure.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace emargin
