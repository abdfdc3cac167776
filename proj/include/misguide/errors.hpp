#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace misguide {

// Base for every error raised by the library. kind() is a stable identifier
// used in CLI diagnostics.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "Error"; }
};

#define MISGUIDE_DECLARE_ERROR(Name)                                  \
  class Name : public Error {                                         \
   public:                                                            \
    using Error::Error;                                               \
    const char* kind() const noexcept override { return #Name; }      \
  };

MISGUIDE_DECLARE_ERROR(DimensionMismatch)
MISGUIDE_DECLARE_ERROR(NotPositiveDefinite)
MISGUIDE_DECLARE_ERROR(InvalidSpec)
MISGUIDE_DECLARE_ERROR(MissingLabel)
MISGUIDE_DECLARE_ERROR(TooFewSamples)
MISGUIDE_DECLARE_ERROR(Diverged)
MISGUIDE_DECLARE_ERROR(NotFitted)
MISGUIDE_DECLARE_ERROR(NotCalibrated)
MISGUIDE_DECLARE_ERROR(NotNormalized)
MISGUIDE_DECLARE_ERROR(EmptyInput)
MISGUIDE_DECLARE_ERROR(EmptyDataset)
MISGUIDE_DECLARE_ERROR(OutOfRange)
MISGUIDE_DECLARE_ERROR(BudgetExhausted)
MISGUIDE_DECLARE_ERROR(ConfigError)
MISGUIDE_DECLARE_ERROR(FormatError)
MISGUIDE_DECLARE_ERROR(IoError)
MISGUIDE_DECLARE_ERROR(MissingArtifact)

#undef MISGUIDE_DECLARE_ERROR

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  const char* kind() const noexcept override { return "ParseError"; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Raised by covariance fitting; carries the offending class index.
class ClassError : public Error {
 public:
  ClassError(std::size_t cls, const std::string& what)
      : Error("class " + std::to_string(cls) + ": " + what), cls_(cls) {}
  std::size_t cls() const noexcept { return cls_; }

 private:
  std::size_t cls_;
};

class ClassTooSmall : public ClassError {
 public:
  using ClassError::ClassError;
  const char* kind() const noexcept override { return "ClassTooSmall"; }
};

class SingularCovariance : public ClassError {
 public:
  using ClassError::ClassError;
  const char* kind() const noexcept override { return "SingularCovariance"; }
};

// Every violation found while validating a run configuration.
class ConfigInvalid : public Error {
 public:
  explicit ConfigInvalid(std::vector<std::string> violations)
      : Error(join(violations)), violations_(std::move(violations)) {}
  const char* kind() const noexcept override { return "ConfigInvalid"; }
  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) out += (out.empty() ? "" : "; ") + s;
    return out;
  }
  std::vector<std::string> violations_;
};

}  // namespace misguide
