#pragma once

#include <stdexcept>
#include <string>

namespace discdiff {

// Base of every error thrown by the library. `kind()` is a stable short tag
// used in structured CLI diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& m) : Error("invalid_argument", m) {}
};

class ShapeMismatch : public Error {
 public:
  explicit ShapeMismatch(const std::string& m) : Error("shape_mismatch", m) {}
};

class StepOutOfRange : public Error {
 public:
  explicit StepOutOfRange(const std::string& m) : Error("step_out_of_range", m) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& m) : Error("domain_error", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io_error", m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("config_error", m) {}
};

class NonFiniteLoss : public Error {
 public:
  explicit NonFiniteLoss(const std::string& m) : Error("non_finite_loss", m) {}
};

}  // namespace discdiff
