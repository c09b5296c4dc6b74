#pragma once

#include <stdexcept>
#include <string>

namespace q2rl {

// Thrown when tensor/vector dimensions disagree with what an operation needs.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown when a caller hands over invalid values (empty dataset, bad range, ...).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown when a numeric invariant breaks (non-finite loss, checksum mismatch, ...).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown when a config file is malformed, has unknown keys, or out-of-range values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown when a file or directory is missing or cannot be written.
class PathError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Retryable: an operation was asked to run before its inputs are ready
// (e.g., sampling an underfull replay buffer).
class NotReadyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace q2rl
