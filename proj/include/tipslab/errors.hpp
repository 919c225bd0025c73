#pragma once

#include <stdexcept>
#include <string>

namespace tipslab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad arguments, config values or scene descriptions. Maps to CLI exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures (unwritable directories, missing datasets).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values detected in logits or losses.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint could not be read, or carries an unsupported version.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// An API was used against its contract (e.g. EMA update on a frozen teacher).
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace tipslab
