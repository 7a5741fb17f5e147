#pragma once

#include <stdexcept>
#include <string>

namespace headmask {

// Base for all library errors. The CLI maps each subclass to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not agree for the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An API precondition was violated by the caller (e.g. backward twice).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid arguments or configuration supplied by a user.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed input files or corpora.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values encountered during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace headmask
