#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace endonet {

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  EmptyAxis,
  NonScalarLoss,
  GraphConsumed,
  NaNDetected,
  NonDeterministic,
  InvalidMpp,
  MissingLevel,
  DimensionMismatch,
  NoTissue,
  OutsideSlide,
  Corrupt,
  SingleClass,
  EmptyInput,
  ConflictingSplit,
  MalformedInput,
  Io,
};

constexpr std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyAxis: return "EmptyAxis";
    case ErrorCode::NonScalarLoss: return "NonScalarLoss";
    case ErrorCode::GraphConsumed: return "GraphConsumed";
    case ErrorCode::NaNDetected: return "NaNDetected";
    case ErrorCode::NonDeterministic: return "NonDeterministic";
    case ErrorCode::InvalidMpp: return "InvalidMpp";
    case ErrorCode::MissingLevel: return "MissingLevel";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NoTissue: return "NoTissue";
    case ErrorCode::OutsideSlide: return "OutsideSlide";
    case ErrorCode::Corrupt: return "Corrupt";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::ConflictingSplit: return "ConflictingSplit";
    case ErrorCode::MalformedInput: return "MalformedInput";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

/// Every domain failure in the library is raised as an Error carrying a
/// machine-readable code; the CLI turns it into a one-line JSON record.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code),
        detail_(message) {}

  ErrorCode code() const noexcept { return code_; }
  std::string_view code_name() const noexcept { return error_code_name(code_); }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace endonet
