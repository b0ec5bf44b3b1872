#pragma once

#include <stdexcept>
#include <string>

namespace iomatch {

// Shape disagreement between tensors (reports both shapes).
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// API misuse: backward on a consumed tape, optimizer without gradients, etc.
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

// Invalid configuration value (out of range, infeasible counts, unknown key).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Bad input data (out-of-range label, inconsistent dataset).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input file; message carries file name and line number.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when a training run produces a non-finite loss; carries batch diagnostics.
struct TrainingAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace iomatch
