#pragma once

#include <stdexcept>
#include <string>

namespace ssg {

// Input violates a documented invariant or precondition.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Near-zero norm or otherwise numerically degenerate input.
class DegenerateInputError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

// Malformed serialized data (bad magic, version, truncation).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Stream or filesystem failure.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Inconsistent run configuration (missing checkpoint, wrong phase, ...).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, long step)
        : std::runtime_error(what), step_(step) {}
    long step() const { return step_; }

private:
    long step_;
};

}  // namespace ssg
