#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace fprb {

enum class ErrorKind {
  validation,  // input violates a documented invariant
  io,          // file missing, unreadable, unwritable
  format,      // malformed or corrupted file contents
  internal,
};

const char* to_string(ErrorKind kind);

// Single exception type for the engine. `subject` names the offending case,
// file, or field when one exists so the CLI can emit machine-readable records.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message, std::string subject = {})
      : std::runtime_error(message), kind_(kind), subject_(std::move(subject)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& subject() const noexcept { return subject_; }

 private:
  ErrorKind kind_;
  std::string subject_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message, std::string subject = {}) {
  throw Error(kind, message, std::move(subject));
}

inline void require(bool cond, const std::string& message, std::string subject = {}) {
  if (!cond) fail(ErrorKind::validation, message, std::move(subject));
}

}  // namespace fprb
