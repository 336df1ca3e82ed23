// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cwamsn {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible for the requested op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A forward op produced NaN/Inf, or an input was numerically degenerate.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// API misuse (e.g. backward on a non-scalar).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or parse failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// On-disk data disagrees with the metadata describing it.
class IntegrityError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace cwamsn
