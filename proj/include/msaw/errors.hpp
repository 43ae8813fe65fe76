#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace msaw {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered, or a loss that cannot be differentiated.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Batch statistics requested on a batch of one.
class DegenerateBatchError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file; carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class TruncationError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace msaw
