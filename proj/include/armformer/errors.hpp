#pragma once

#include <stdexcept>
#include <string>

namespace armformer {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that violate an operation's preconditions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// API misuse: non-scalar loss, non-deterministic gradient-check function, ...
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid data values, e.g. labels outside the class range.
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint with a bad magic, version, or checksum.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss during optimization.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace armformer
