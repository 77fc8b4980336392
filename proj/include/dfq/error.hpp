#pragma once

#include <stdexcept>
#include <string>

namespace dfq {

// Error taxonomy. The CLI maps each family onto a distinct exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not conform to an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A precondition or ordering contract was violated by the caller
// (uncalibrated model, bad labels, invalid config, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced during optimization or training.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

// File I/O and binary format failures.
class FormatError : public Error {
 public:
  enum class Kind { Io, BadMagic, VersionMismatch, Truncated, ShapeMismatch, Malformed };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace dfq
