#pragma once

#include <stdexcept>
#include <string>

namespace covidnet {

/// Base of every domain error raised by the toolkit. The CLI maps these to
/// exit code 1; anything else escaping is a bug.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed architecture/training configuration or invalid op parameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes that do not line up. `dimension()` names the offending axis.
class ShapeError : public Error {
 public:
  ShapeError(std::string dimension, const std::string& message)
      : Error("shape mismatch in " + dimension + ": " + message),
        dimension_(std::move(dimension)) {}

  const std::string& dimension() const noexcept { return dimension_; }

 private:
  std::string dimension_;
};

/// Bad input data: unknown labels, out-of-range class indices, empty matrices.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint file is not a valid CNCT stream.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint and graph disagree on the set of tensors.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

/// Weights required for execution are absent.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Batch sampler cannot satisfy its contract (e.g. an empty class).
class SamplerError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures (unwritable directory, unreadable image).
class IoError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition of an operation does not hold.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values encountered during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Internal inconsistency, e.g. an activation cache from a different graph.
class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace covidnet
