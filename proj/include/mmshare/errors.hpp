#pragma once

#include <stdexcept>
#include <string>

namespace mmshare {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation (log of a
/// non-positive value, non-positive temperature, zero-vector normalization).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed user data: out-of-vocabulary token, wrong image size, bad k.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Invalid model, training or experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward() on a non-scalar node.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint file unreadable, truncated or inconsistent with its config.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmshare
