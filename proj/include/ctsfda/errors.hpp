#pragma once

#include <stdexcept>
#include <string>

namespace ctsfda {

// Shape or dtype of an input does not match what the operation expects.
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Bad configuration value or malformed config/manifest file.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A contract the pipeline must uphold was broken (frozen weights changed,
// source data touched during adaptation, ...).
struct InvariantError : std::runtime_error {
  explicit InvariantError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
  DivergenceError(const std::string& stage, int epoch)
      : std::runtime_error(stage + ": non-finite loss at epoch " +
                           std::to_string(epoch)),
        epoch(epoch) {}
  int epoch;
};

}  // namespace ctsfda
