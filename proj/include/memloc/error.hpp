#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace memloc {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not agree for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An index (token id, class id, layer) is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. running backward twice on the same tape.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Invalid model / task / experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid numeric parameter (rate, k, designated layer set, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Two models that must share a configuration do not.
class IncompatibleModelError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. Carries the byte offset or line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : Error(what), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

/// Dataset contents cannot support the request (e.g. binarising one class).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A label string that was not part of the training label map.
class LabelError : public Error {
 public:
  using Error::Error;
};

/// A run whose result cannot be normalised (e.g. full-window error of zero).
class DegenerateRunError : public Error {
 public:
  using Error::Error;
};

}  // namespace memloc
