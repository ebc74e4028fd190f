#pragma once

#include <stdexcept>
#include <string>

namespace pnml {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not chain or do not match.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A precondition on the arguments was violated (empty batch, label out of range, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input admits no valid result, e.g. normalizing an all-zero probability vector.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Malformed document or binary file.
class ParseError : public Error {
 public:
  using Error::Error;
};

}  // namespace pnml
