#pragma once

#include <stdexcept>
#include <string>

namespace dis {

/// Tensor extents that do not fit an operation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite values, domain violations, divergent training.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller broke an API precondition (non-scalar loss, out-of-range timestep, ...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Invalid model/run configuration or unreadable input files.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or truncated files (images, checkpoints).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace dis
