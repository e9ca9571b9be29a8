#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace persona_guard {

enum class ErrorCode {
  config,
  parse,
  validation,
  empty_corpus,
  empty_dataset,
  split,
  stage_order,
  missing_checkpoint,
  divergence,
  nan_loss,
  dimension,
  not_found,
  bad_request,
  io,
  hash_mismatch,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::config: return "E_CONFIG";
    case ErrorCode::parse: return "E_PARSE";
    case ErrorCode::validation: return "E_VALIDATION";
    case ErrorCode::empty_corpus: return "E_EMPTY_CORPUS";
    case ErrorCode::empty_dataset: return "E_EMPTY_DATASET";
    case ErrorCode::split: return "E_SPLIT";
    case ErrorCode::stage_order: return "E_STAGE_ORDER";
    case ErrorCode::missing_checkpoint: return "E_MISSING_CHECKPOINT";
    case ErrorCode::divergence: return "E_DIVERGENCE";
    case ErrorCode::nan_loss: return "E_NAN";
    case ErrorCode::dimension: return "E_DIMENSION";
    case ErrorCode::not_found: return "E_NOT_FOUND";
    case ErrorCode::bad_request: return "E_BAD_REQUEST";
    case ErrorCode::io: return "E_IO";
    case ErrorCode::hash_mismatch: return "E_HASH_MISMATCH";
  }
  return "E_UNKNOWN";
}

/// Process exit status used by the CLI for each error class.
constexpr int exit_status(ErrorCode code) noexcept {
  return 10 + static_cast<int>(code);
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace persona_guard
