#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace kil {

// All recoverable failures carry a short machine-readable code next to the
// human-readable message. Callers that need to branch on the failure kind
// match on code(), not on what().
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(std::string code, const std::string& message) {
  throw Error(std::move(code), message);
}

inline void require(bool cond, const char* code, const std::string& message) {
  if (!cond) fail(code, message);
}

}  // namespace kil
