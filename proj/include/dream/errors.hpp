#pragma once

#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dream {

// Non-fatal diagnostics are collected into the caller's sink when one is
// given, otherwise printed to stderr.
inline void emit_warning(std::vector<std::string>* sink, const std::string& message) {
    if (sink)
        sink->push_back(message);
    else
        std::cerr << "warning: " << message << "\n";
}

// Error taxonomy shared across the toolkit. The CLI maps `kind()` into the
// machine-readable error JSON emitted on stderr.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

// Malformed arguments: shape mismatches, out-of-range values, duplicate labels.
class InvalidInput : public Error {
public:
    explicit InvalidInput(const std::string& message) : Error("invalid_input", message) {}
};

// Operation called out of order (e.g. scoring an unfitted model).
class StateError : public Error {
public:
    explicit StateError(const std::string& message) : Error("state_error", message) {}
};

// Non-finite values produced during optimization.
class TrainingDivergence : public Error {
public:
    explicit TrainingDivergence(const std::string& message) : Error("training_divergence", message) {}
};

// Non-finite values produced while scoring or evaluating.
class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& message) : Error("numerical_error", message) {}
};

// A task that is ill-posed for the given data (single-class training set,
// undefined AUC, empty reference family, ...).
class DegenerateTask : public Error {
public:
    explicit DegenerateTask(const std::string& message) : Error("degenerate_task", message) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error("io_error", message) {}
};

}  // namespace dream
