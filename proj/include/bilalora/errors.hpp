#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bilalora {

enum class ErrorCode {
  kShapeMismatch,
  kNonFinite,
  kDegenerate,
  kContract,
  kOutOfRange,
  kConvergence,
  kIo,
  kConfig,
};

std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what)
      : Error(ErrorCode::kShapeMismatch, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(ErrorCode::kNonFinite, what) {}
};

// Raised when the embedding displacement of a sample (or of every sample in
// a batch) is too small to define a direction.
class DegenerateError : public Error {
 public:
  explicit DegenerateError(const std::string& what)
      : Error(ErrorCode::kDegenerate, what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what)
      : Error(ErrorCode::kContract, what) {}
};

class RangeError : public Error {
 public:
  explicit RangeError(const std::string& what)
      : Error(ErrorCode::kOutOfRange, what) {}
};

class ConvergenceError : public Error {
 public:
  explicit ConvergenceError(const std::string& what)
      : Error(ErrorCode::kConvergence, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::kIo, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorCode::kConfig, what) {}
};

}  // namespace bilalora
