#pragma once

#include <stdexcept>
#include <string>

namespace afft {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN/Inf or an undefined quantity (e.g. fully masked softmax row).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid arguments or configuration supplied by a caller.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, missing or inconsistent data.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace afft
