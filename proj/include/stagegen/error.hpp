#pragma once

#include <stdexcept>
#include <string>

namespace stagegen {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or image dimensions. The message names the offending dimension.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A file could not be read, written or decoded.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A serialized artifact (checkpoint, manifest, CSV) is malformed or corrupt.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A training loss became NaN or infinite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace stagegen
