#pragma once

#include <stdexcept>
#include <string>

namespace posgen {

/// Base of every error the library throws. `exit_code` follows the CLI
/// convention: 2 config, 3 dependency, 4 divergence, 1 anything else.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, int exit_code = 1)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

/// Input data violates a schema or range constraint.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(what, 1) {}
};

/// Malformed or inconsistent configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, 2) {}
};

/// A pipeline stage is missing an upstream artifact, or an artifact does
/// not match what the stage expects.
class DependencyError : public Error {
 public:
  explicit DependencyError(const std::string& what) : Error(what, 3) {}
};

/// A loss became non-finite during training.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step)
      : Error(what + " (step " + std::to_string(step) + ")", 4), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

/// Shapes passed to a numeric routine do not fit together.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(what, 1) {}
};

/// Corrupt, truncated or version-mismatched checkpoint.
class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error(what, 3) {}
};

/// A metric is undefined for the given input (e.g. AUC on one class).
class MetricError : public Error {
 public:
  explicit MetricError(const std::string& what) : Error(what, 1) {}
};

}  // namespace posgen
