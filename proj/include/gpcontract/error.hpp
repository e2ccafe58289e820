#pragma once

#include <stdexcept>
#include <string>

namespace gpcontract {

// Error categories map one-to-one onto the CLI exit codes.
enum class ErrorCode {
  kInvalidInput = 3,
  kInfeasible = 2,
  kNumericalFailure = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void throw_invalid(const std::string& what) {
  throw Error(ErrorCode::kInvalidInput, what);
}

[[noreturn]] inline void throw_numerical(const std::string& what) {
  throw Error(ErrorCode::kNumericalFailure, what);
}

inline void check_dim(const std::string& where, const std::string& arg,
                      long actual, long expected) {
  if (actual != expected) {
    throw_invalid(where + ": argument '" + arg + "' has dimension " +
                  std::to_string(actual) + ", expected " +
                  std::to_string(expected));
  }
}

}  // namespace gpcontract
