#pragma once

#include <stdexcept>
#include <string>

namespace calm {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform to an op's requirements.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Input data is malformed or too small to use.
class DataError : public Error {
 public:
  using Error::Error;
};

class EmptyCorpusError : public DataError {
 public:
  using DataError::DataError;
};

class InsufficientDataError : public DataError {
 public:
  using DataError::DataError;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// A loss was requested over a batch with no prediction targets.
class EmptyLossError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace calm
