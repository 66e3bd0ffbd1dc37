// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dimple {

/// Operand shapes are incompatible with the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value lies outside the domain of a function (log of non-positive, division by zero, overflow).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A row could not be L2-normalized because it has zero length.
class DegenerateProjectionError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// An API precondition was violated (non-scalar loss, repeated backward, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid configuration: bad ranges, incompatible modes, unknown keys.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A classification task with fewer than two classes.
class DegenerateTaskError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Too few samples for a statistical estimator.
class SampleSizeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Every class stratum has fewer than two samples, so the class-conditioned estimate is undefined.
class EstimatorUndefinedError : public SampleSizeError {
 public:
  using SampleSizeError::SampleSizeError;
};

/// A training run produced a non-finite loss.
class DivergedRunError : public std::runtime_error {
 public:
  DivergedRunError(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

/// File input/output failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents (bad magic, unparsable manifest).
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// File format version not supported by this build.
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// File ends before the data its manifest promises.
class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// A stored tensor's shape disagrees with the model it is loaded into.
class ShapeMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace dimple
