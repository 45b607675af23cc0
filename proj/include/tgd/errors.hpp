#pragma once

#include <stdexcept>
#include <string>

namespace tgd {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A documented precondition was violated by the caller.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Two parameter sets differ in names, shapes or roles.
class AlignmentError : public Error {
 public:
  AlignmentError(std::string parameter, const std::string& detail)
      : Error("parameter '" + parameter + "': " + detail),
        parameter_(std::move(parameter)) {}
  const std::string& parameter() const { return parameter_; }

 private:
  std::string parameter_;
};

/// Invalid user configuration (model spec, training config, dataset policy).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A metric is undefined for the given input (e.g. AUROC with one class).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite value.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Checkpoint loading failures, kept distinct so callers can tell them apart.
class CorruptManifest : public IoError {
 public:
  using IoError::IoError;
};

class CheckpointShapeMismatch : public IoError {
 public:
  CheckpointShapeMismatch(std::string parameter, const std::string& detail)
      : IoError("checkpoint parameter '" + parameter + "': " + detail),
        parameter_(std::move(parameter)) {}
  const std::string& parameter() const { return parameter_; }

 private:
  std::string parameter_;
};

class SpecHashMismatch : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace tgd
