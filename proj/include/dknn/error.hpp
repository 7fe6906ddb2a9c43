#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dknn {

enum class ErrorCode {
  MalformedRecord,
  DuplicateId,
  EmptyText,
  TooFewDocuments,
  TransportError,
  BackendRefused,
  UnparsableCompletion,
  LogprobsUnsupported,
  DimensionMismatch,
  UnknownDocId,
  ZeroVector,
  KTooLarge,
  TargetInDemos,
  InvalidTemplate,
  FingerprintMismatch,
  Io,
  SchemaVersionMismatch,
  SelfPairing,
  InsufficientPerLabel,
  DegenerateLabels,
  InvalidArgument,
  MissingArtifact,
  ConfigError,
};

std::string_view error_code_name(ErrorCode code) noexcept;

// Every failure surfaced by the library carries one of the codes above so
// callers (and the CLI exit-code mapping) can branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace dknn
