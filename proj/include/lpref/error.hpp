#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lpref {

enum class ErrorKind {
  kInvalidInput,
  kParse,
  kValidation,
  kCoverage,
  kMissingTrace,
  kDivisionGuard,
  kAuth,
  kConflict,
  kSessionOver,
  kSession,
  kNotFound,
  kIo,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidInput: return "invalid-input";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kValidation: return "validation";
    case ErrorKind::kCoverage: return "coverage";
    case ErrorKind::kMissingTrace: return "missing-trace";
    case ErrorKind::kDivisionGuard: return "division-guard";
    case ErrorKind::kAuth: return "auth";
    case ErrorKind::kConflict: return "conflict";
    case ErrorKind::kSessionOver: return "session-over";
    case ErrorKind::kSession: return "session";
    case ErrorKind::kNotFound: return "not-found";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

// Every failure surfaced by the library carries a kind so callers (HTTP
// layer, CLI exit codes) can map it without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace lpref
