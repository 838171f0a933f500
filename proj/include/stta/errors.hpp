#pragma once

#include <stdexcept>
#include <string>

namespace stta {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Operation invoked on an object whose state does not permit it.
class StateError : public Error {
 public:
  using Error::Error;
};

// API misuse (e.g. a handle from a different tape).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed external data: labels, checkpoints, config files.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace stta
