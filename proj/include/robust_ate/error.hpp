#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace robust_ate {

enum class ErrorKind {
  InvalidArgument,
  ShapeMismatch,
  NonBinaryTreatment,
  NonFiniteValue,
  DegenerateArm,
  EmptyInput,
  ParseError,
  RaggedRows,
  EmptyMatrix,
  UnknownLabel,
  InvalidLabels,
  ConvexHullViolation,
  SingularHessian,
  NotConverged,
  AllInfeasible,
  SingularBread,
  UndefinedAtZero,
  OverflowGuard,
  RootNotBracketed,
  TooManyFailedReplicates,
  IoError,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonBinaryTreatment: return "NonBinaryTreatment";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::DegenerateArm: return "DegenerateArm";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::RaggedRows: return "RaggedRows";
    case ErrorKind::EmptyMatrix: return "EmptyMatrix";
    case ErrorKind::UnknownLabel: return "UnknownLabel";
    case ErrorKind::InvalidLabels: return "InvalidLabels";
    case ErrorKind::ConvexHullViolation: return "ConvexHullViolation";
    case ErrorKind::SingularHessian: return "SingularHessian";
    case ErrorKind::NotConverged: return "NotConverged";
    case ErrorKind::AllInfeasible: return "AllInfeasible";
    case ErrorKind::SingularBread: return "SingularBread";
    case ErrorKind::UndefinedAtZero: return "UndefinedAtZero";
    case ErrorKind::OverflowGuard: return "OverflowGuard";
    case ErrorKind::RootNotBracketed: return "RootNotBracketed";
    case ErrorKind::TooManyFailedReplicates: return "TooManyFailedReplicates";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

/// Exception carrying a machine-checkable kind plus an optional cell
/// location (row/column) for input-validation failures.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  Error(ErrorKind kind, const std::string& what, std::size_t row,
        std::optional<std::size_t> col = std::nullopt)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what + " (row " +
                           std::to_string(row) +
                           (col ? ", col " + std::to_string(*col) : std::string()) + ")"),
        kind_(kind),
        row_(row),
        col_(col) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::optional<std::size_t> row() const noexcept { return row_; }
  std::optional<std::size_t> col() const noexcept { return col_; }

 private:
  ErrorKind kind_;
  std::optional<std::size_t> row_;
  std::optional<std::size_t> col_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace robust_ate
