#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mcsad {

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

/// A math function was evaluated outside its domain (log/sqrt of a negative).
class DomainError : public Error {
 public:
  DomainError(const std::string& what, std::ptrdiff_t index)
      : Error(what + " at flat index " + std::to_string(index)), index_(index) {}
  std::ptrdiff_t index() const { return index_; }

 private:
  std::ptrdiff_t index_;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared where a finite one is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// The federated round protocol was driven out of order or with missing inputs.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or decoding failure; the message names the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A serialized message could not be decoded.
class FormatError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public FormatError {
 public:
  enum class Kind { BadMagic, VersionMismatch, Truncated, ShapeMismatch, UnknownParameter };

  CheckpointError(Kind kind, const std::string& what) : FormatError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Aggregation received inputs it cannot average.
class AggregationError : public Error {
 public:
  enum class Kind { Empty, MixedRounds, ShapeMismatch };

  AggregationError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace mcsad
