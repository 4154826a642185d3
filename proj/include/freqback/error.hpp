#pragma once

#include <stdexcept>
#include <string>

namespace freqback {

/// Base of every error thrown by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for the requested operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A NaN or infinity reached an operation.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class SymmetryError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class SchemaError : public Error {
public:
    using Error::Error;
};

/// Training diverged; carries the epoch at which the loss became non-finite.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, int epoch)
        : Error("epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

class OptimizationError : public Error {
public:
    OptimizationError(const std::string& what, double last_finite_loss)
        : Error(what + " (last finite loss " + std::to_string(last_finite_loss) + ")"),
          last_finite_loss_(last_finite_loss) {}
    double last_finite_loss() const noexcept { return last_finite_loss_; }

private:
    double last_finite_loss_;
};

/// Wraps a pipeline failure with the stage that raised it.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& config_hash, const std::string& what)
        : Error("[" + stage + "] (config " + config_hash + ") " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace freqback
