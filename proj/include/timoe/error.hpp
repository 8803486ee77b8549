#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace timoe {

enum class ErrorCode {
  OutOfRange,
  UnknownToken,
  InvalidConfig,
  ShapeMismatch,
  TokenOutOfRange,
  ChecksumMismatch,
  VersionMismatch,
  TokenizerMismatch,
  NoEligibleExpert,
  DegenerateWeights,
  MissingHidden,
  EmptyBin,
  MixedBins,
  EmptyOption,
  ContextOverflow,
  EmptyBenchmark,
  EmptyTimeline,
  ValidationError,
  ParseError,
  InvalidTag,
  WrongOptionCount,
  MultipleCorrect,
  MissingCorrect,
  DuplicateAnswer,
  EndpointUnavailable,
  EmptyText,
  ZeroVector,
  IoError,
  ConfigError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::TokenOutOfRange: return "TokenOutOfRange";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::TokenizerMismatch: return "TokenizerMismatch";
    case ErrorCode::NoEligibleExpert: return "NoEligibleExpert";
    case ErrorCode::DegenerateWeights: return "DegenerateWeights";
    case ErrorCode::MissingHidden: return "MissingHidden";
    case ErrorCode::EmptyBin: return "EmptyBin";
    case ErrorCode::MixedBins: return "MixedBins";
    case ErrorCode::EmptyOption: return "EmptyOption";
    case ErrorCode::ContextOverflow: return "ContextOverflow";
    case ErrorCode::EmptyBenchmark: return "EmptyBenchmark";
    case ErrorCode::EmptyTimeline: return "EmptyTimeline";
    case ErrorCode::ValidationError: return "ValidationError";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::InvalidTag: return "InvalidTag";
    case ErrorCode::WrongOptionCount: return "WrongOptionCount";
    case ErrorCode::MultipleCorrect: return "MultipleCorrect";
    case ErrorCode::MissingCorrect: return "MissingCorrect";
    case ErrorCode::DuplicateAnswer: return "DuplicateAnswer";
    case ErrorCode::EndpointUnavailable: return "EndpointUnavailable";
    case ErrorCode::EmptyText: return "EmptyText";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

/// Every failure in the library surfaces as this exception; `code()` is the
/// stable, testable part and `what()` carries context for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

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

}  // namespace timoe
