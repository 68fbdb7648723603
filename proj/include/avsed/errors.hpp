// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace avsed {

/// Raised for invalid user input: configs, files, annotations. The CLI maps
/// every subclass to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DataError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Spectral/pretrained frame counts violate the 4:1 contract.
class AlignmentError : public DataError {
 public:
  using DataError::DataError;
};

class ParseError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Failures during a run (non-finite loss, I/O, misuse of layer state).
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace avsed
