#pragma once

#include <stdexcept>
#include <string>

namespace stac {

enum class ErrorCode {
  kInvalidArgument,
  kDimensionMismatch,
  kUnknownLevel,
  kBadMagic,
  kDigestMismatch,
  kTruncatedStream,
  kCorruptStream,
  kEmptyCorpus,
  kEmptyLadder,
  kUnsatisfiable,
  kRegionOutOfBounds,
  kNonDivisible,
  kChainMismatch,
  kFeedbackMissing,
  kUnknownKeyframe,
  kOracleFailure,
  kProtocolError,
  kTruncated,
  kLinkLost,
  kUnavailable,
  kIo,
  kBadConfig,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kUnknownLevel: return "UnknownLevel";
    case ErrorCode::kBadMagic: return "BadMagic";
    case ErrorCode::kDigestMismatch: return "DigestMismatch";
    case ErrorCode::kTruncatedStream: return "TruncatedStream";
    case ErrorCode::kCorruptStream: return "CorruptStream";
    case ErrorCode::kEmptyCorpus: return "EmptyCorpus";
    case ErrorCode::kEmptyLadder: return "EmptyLadder";
    case ErrorCode::kUnsatisfiable: return "Unsatisfiable";
    case ErrorCode::kRegionOutOfBounds: return "RegionOutOfBounds";
    case ErrorCode::kNonDivisible: return "NonDivisible";
    case ErrorCode::kChainMismatch: return "ChainMismatch";
    case ErrorCode::kFeedbackMissing: return "FeedbackMissing";
    case ErrorCode::kUnknownKeyframe: return "UnknownKeyframe";
    case ErrorCode::kOracleFailure: return "OracleFailure";
    case ErrorCode::kProtocolError: return "ProtocolError";
    case ErrorCode::kTruncated: return "Truncated";
    case ErrorCode::kLinkLost: return "LinkLost";
    case ErrorCode::kUnavailable: return "Unavailable";
    case ErrorCode::kIo: return "Io";
    case ErrorCode::kBadConfig: return "BadConfig";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace stac
