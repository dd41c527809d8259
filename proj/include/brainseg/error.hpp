#pragma once

#include <stdexcept>
#include <string>

namespace brainseg {

/// Root of every exception thrown by the library. The CLI maps subclasses
/// onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents (bad header field, truncated payload, bad magic).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// File-level datatype the reader does not handle.
class UnsupportedTypeError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Filesystem failures: missing input, unwritable destination.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Caller passed an invalid value (out-of-range index, unknown name, duplicates).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Tensor or grid dimensions that do not fit an operation.
class ShapeError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

/// Invalid configuration (phantom too small, bad pipeline config).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace brainseg
