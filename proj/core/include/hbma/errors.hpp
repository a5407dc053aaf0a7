#pragma once

#include <stdexcept>
#include <string>

namespace hbma {

/// Malformed input files or column layouts.
class SchemaError : public std::runtime_error {
 public:
  explicit SchemaError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Structurally valid input that violates a data invariant.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Filesystem problems (missing file, unreadable, unwritable).
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical preconditions (non-positive scale, non-PD covariance, ...).
class DomainError : public std::runtime_error {
 public:
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Sampler could not find a starting point with finite density/gradient.
class InitializationError : public std::runtime_error {
 public:
  explicit InitializationError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace hbma
