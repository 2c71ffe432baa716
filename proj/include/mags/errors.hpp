#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mags {

enum class ErrorCode {
  DegenerateFacet,
  RankDeficient,
  CollapsedFacet,
  NoConstraints,
  SolverSingular,
  InvalidHandle,
  EmptySurface,
  ShapeMismatch,
  DimensionMismatch,
  EmptyDataset,
  ParseError,
  MissingImage,
  IoError,
  SchemaError,
  VersionMismatch,
  CorruptBlob,
  CheckpointError,
  CapacityExceeded,
  NotFound,
  InvalidArgument,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DegenerateFacet: return "DegenerateFacet";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::CollapsedFacet: return "CollapsedFacet";
    case ErrorCode::NoConstraints: return "NoConstraints";
    case ErrorCode::SolverSingular: return "SolverSingular";
    case ErrorCode::InvalidHandle: return "InvalidHandle";
    case ErrorCode::EmptySurface: return "EmptySurface";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::MissingImage: return "MissingImage";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptBlob: return "CorruptBlob";
    case ErrorCode::CheckpointError: return "CheckpointError";
    case ErrorCode::CapacityExceeded: return "CapacityExceeded";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

// Every failure raised by the library carries a machine-readable code; the
// message holds the human-readable context (file, field, facet index, ...).
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

}  // namespace mags
