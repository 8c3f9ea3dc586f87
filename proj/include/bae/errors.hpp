#pragma once

#include <stdexcept>
#include <string>

namespace bae {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergedError : public Error {
 public:
  using Error::Error;
};

/// A non-finite quantity appeared while evaluating an energy; the message
/// names the stage that produced it.
class EnergyEvaluationError : public Error {
 public:
  using Error::Error;
};

/// Raised when a chain rejects too many consecutive proposals.
class StuckChainError : public Error {
 public:
  using Error::Error;
};

}  // namespace bae
