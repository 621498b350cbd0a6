#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace asymseg {

enum class ErrorCode {
  NonIntersecting,
  AngleOutOfRange,
  Degenerate,
  EmptyInput,
  EmptyMask,
  TooThin,
  ShapeMismatch,
  LengthMismatch,
  GraphNotRecorded,
  EmptyDataset,
  DegenerateSample,
  IoError,
  FormatError,
  ConfigError,
  NonFiniteLoss,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonIntersecting: return "NonIntersecting";
    case ErrorCode::AngleOutOfRange: return "AngleOutOfRange";
    case ErrorCode::Degenerate: return "Degenerate";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::TooThin: return "TooThin";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::GraphNotRecorded: return "GraphNotRecorded";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DegenerateSample: return "DegenerateSample";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
  }
  return "Unknown";
}

/// Library-wide exception. `code()` identifies the failure class.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace asymseg
