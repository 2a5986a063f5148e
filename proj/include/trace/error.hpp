#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace trace {

enum class ErrorCode {
  ZeroVector,
  NonFinite,
  DimMismatch,
  EmptyInput,
  NonPositiveTemperature,
  InvalidDims,
  EmptyWindow,
  NotNormalized,
  DuplicateId,
  InvalidThreshold,
  InvalidArgument,
  EmptyBankSubset,
  EmptyHits,
  TooFewRecords,
  SingleClass,
  NoPositives,
  LengthMismatch,
  InvalidConfig,
  EmptyText,
  BadMagic,
  VersionMismatch,
  TruncatedFile,
  ChecksumMismatch,
  ShapeMismatch,
  FileNotFound,
  IoError,
  MalformedJson,
  UnknownLabel,
  Timeout,
  MalformedResponse,
  HttpStatus,
  ServiceUnavailable,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::NonPositiveTemperature: return "NonPositiveTemperature";
    case ErrorCode::InvalidDims: return "InvalidDims";
    case ErrorCode::EmptyWindow: return "EmptyWindow";
    case ErrorCode::NotNormalized: return "NotNormalized";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::InvalidThreshold: return "InvalidThreshold";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::EmptyBankSubset: return "EmptyBankSubset";
    case ErrorCode::EmptyHits: return "EmptyHits";
    case ErrorCode::TooFewRecords: return "TooFewRecords";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::NoPositives: return "NoPositives";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::EmptyText: return "EmptyText";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::FileNotFound: return "FileNotFound";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::MalformedJson: return "MalformedJson";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::MalformedResponse: return "MalformedResponse";
    case ErrorCode::HttpStatus: return "HttpStatus";
    case ErrorCode::ServiceUnavailable: return "ServiceUnavailable";
  }
  return "Unknown";
}

// Every failure raised by the library carries one of the codes above so
// callers (and the CLI's exit-code mapping) can branch without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Failure attributable to an external service (the HTTP embedder). Kept
// distinct so the CLI can report it with its own exit code.
class ServiceError : public Error {
 public:
  using Error::Error;
};

class HttpStatusError : public ServiceError {
 public:
  HttpStatusError(int status, const std::string& what)
      : ServiceError(ErrorCode::HttpStatus, what), status_(status) {}

  int status() const noexcept { return status_; }

 private:
  int status_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace trace
