#pragma once

#include <stdexcept>
#include <string>

namespace rad2ct {

/// Base of every error raised by the library. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or volume extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Integer index outside its valid range (targets, tokens, slices).
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a precondition (bad argument, bad configuration).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input data is malformed or inconsistent with a model.
class DataError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered in a loss, gradient or optimizer state.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A prerequisite artifact (checkpoint, manifest) is missing.
class DependencyError : public Error {
 public:
  using Error::Error;
};

/// Binary file could not be parsed; `offset` is the byte position of the failure.
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : DataError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Invalid phantom specification.
class SpecError : public UsageError {
 public:
  using UsageError::UsageError;
};

}  // namespace rad2ct
