#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lab {

// Base of every error thrown by the library. The CLI maps subclasses onto
// process exit codes (see tools/lab_cli.cpp).
class LabError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class DimensionError : public LabError {
 public:
  using LabError::LabError;
};

// Token id outside [0, vocab_size).
class VocabularyError : public LabError {
 public:
  using LabError::LabError;
};

// Sequence longer than the model's context window.
class LengthError : public LabError {
 public:
  using LabError::LabError;
};

// Malformed or missing input to an operation.
class InputError : public LabError {
 public:
  using LabError::LabError;
};

// Non-finite values appeared during optimization.
class TrainingDivergence : public LabError {
 public:
  TrainingDivergence(const std::string& what, std::string parameter = {},
                     long step = -1)
      : LabError(what), parameter_(std::move(parameter)), step_(step) {}

  const std::string& parameter() const noexcept { return parameter_; }
  long step() const noexcept { return step_; }

 private:
  std::string parameter_;
  long step_;
};

// Invalid configuration value or task specification.
class ConfigError : public LabError {
 public:
  using LabError::LabError;
};

// File system or serialization failure.
class IoError : public LabError {
 public:
  using LabError::LabError;
};

}  // namespace lab
