#pragma once

#include <stdexcept>
#include <string>

namespace kss {

// Validation errors map to exit code 2, numerical failures to exit code 3.
enum class ErrorKind { Validation, Numerical };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), kind_(kind), code_(std::move(code)) {}

  ErrorKind kind() const { return kind_; }
  const std::string& code() const { return code_; }

 private:
  ErrorKind kind_;
  std::string code_;
};

[[noreturn]] inline void fail_validation(const std::string& code, const std::string& msg) {
  throw Error(ErrorKind::Validation, code, msg);
}

[[noreturn]] inline void fail_numerical(const std::string& code, const std::string& msg) {
  throw Error(ErrorKind::Numerical, code, msg);
}

}  // namespace kss
