#pragma once

#include <stdexcept>
#include <string>

namespace hydramix {

// Base class for all library errors. Library code never exits the process;
// the CLI maps these onto exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid argument or contract violation (bad k, empty batch, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Tensor extent mismatch; message carries the offending shapes.
class ShapeError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

// Invalid configuration (schema violation, out-of-range hyperparameter).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem / serialization failure.
class IoError : public Error {
 public:
  using Error::Error;
};

// Numerical failure at runtime (non-finite values, domain violations).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace hydramix
