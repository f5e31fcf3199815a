#pragma once

#include <stdexcept>
#include <string>

namespace distilseg {

// Base of every exception the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input-contract failures. The CLI maps these to the validation exit code.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DegenerateInputError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Failures that happen while doing the work (I/O, a stage aborting).
class RuntimeFailure : public Error {
 public:
  using Error::Error;
};

class IoError : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

class StageError : public RuntimeFailure {
 public:
  StageError(std::string stage, const std::string& what)
      : RuntimeFailure("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace distilseg
