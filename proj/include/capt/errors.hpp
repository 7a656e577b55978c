#pragma once

#include <stdexcept>
#include <string>

namespace capt {

// Operand shapes do not conform for a primitive or model call.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced or consumed, or a degenerate value such as a zero-norm row.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Misuse of the gradient tape (double backward, missing tape, detached leaf).
struct TapeError : std::logic_error {
    using std::logic_error::logic_error;
};

// A declared runtime invariant (budget, range, freeze contract) was violated.
struct InvariantViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed configuration, file or argument.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace capt
