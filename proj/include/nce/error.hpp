#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nce {

enum class ErrorCode {
  InvalidArgument,
  MissingColumn,
  NonNumericCell,
  BinaryViolation,
  FewerThanTwoEnvironments,
  NotThreeEnvironments,
  NotOrthogonal,
  DimensionMismatch,
  ScaleCountMismatch,
  BinaryYRequired,
  DivergenceDetected,
  NoTreatedUnits,
  NoGroundTruth,
  IndexOutOfRange,
  SingularDesign,
  TooManySubsets,
  ZeroMassCondition,
  IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::NonNumericCell: return "NonNumericCell";
    case ErrorCode::BinaryViolation: return "BinaryViolation";
    case ErrorCode::FewerThanTwoEnvironments: return "FewerThanTwoEnvironments";
    case ErrorCode::NotThreeEnvironments: return "NotThreeEnvironments";
    case ErrorCode::NotOrthogonal: return "NotOrthogonal";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ScaleCountMismatch: return "ScaleCountMismatch";
    case ErrorCode::BinaryYRequired: return "BinaryYRequired";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::NoTreatedUnits: return "NoTreatedUnits";
    case ErrorCode::NoGroundTruth: return "NoGroundTruth";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::SingularDesign: return "SingularDesign";
    case ErrorCode::TooManySubsets: return "TooManySubsets";
    case ErrorCode::ZeroMassCondition: return "ZeroMassCondition";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

// Every failure in the library is reported through this type; `code()` is the
// stable, machine-checkable part, `what()` carries the human detail.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool ok, ErrorCode code, const std::string& detail) {
  if (!ok) throw Error(code, detail);
}

}  // namespace nce
