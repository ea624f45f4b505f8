#pragma once

// Structured errors: every failure mode the pipeline can report carries a
// stable code (used in CLI output and tests) plus a human-readable message.

#include <stdexcept>
#include <string>

namespace wavetrace {

enum class ErrorCode {
  ConfigError,
  NonLorentzianSignature,
  SingularMetric,
  DerivativeUnavailable,
  DimensionTooSmall,
  NonFinite,
  BadInitialPoint,
  EmptyInput,
  NotExitedByCap,
  GrazingExit,
  StepSizeUnderflow,
  NoReturn,
  ScatteringInconsistent,
  NewtonDiverged,
  FocalPoint,
  FieldIncomplete,
  QuadratureTolFail,
  UnstableGrowth,
  CFLViolation,
  NoCrossing,
  IoError,
};

inline const char* error_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::NonLorentzianSignature: return "NonLorentzianSignature";
    case ErrorCode::SingularMetric: return "SingularMetric";
    case ErrorCode::DerivativeUnavailable: return "DerivativeUnavailable";
    case ErrorCode::DimensionTooSmall: return "DimensionTooSmall";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::BadInitialPoint: return "BadInitialPoint";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::NotExitedByCap: return "NotExitedByCap";
    case ErrorCode::GrazingExit: return "GrazingExit";
    case ErrorCode::StepSizeUnderflow: return "StepSizeUnderflow";
    case ErrorCode::NoReturn: return "NoReturn";
    case ErrorCode::ScatteringInconsistent: return "ScatteringInconsistent";
    case ErrorCode::NewtonDiverged: return "NewtonDiverged";
    case ErrorCode::FocalPoint: return "FocalPoint";
    case ErrorCode::FieldIncomplete: return "FieldIncomplete";
    case ErrorCode::QuadratureTolFail: return "QuadratureTolFail";
    case ErrorCode::UnstableGrowth: return "UnstableGrowth";
    case ErrorCode::CFLViolation: return "CFLViolation";
    case ErrorCode::NoCrossing: return "NoCrossing";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_name(code)) + ": " + message),
        code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace wavetrace
