#pragma once

#include <stdexcept>
#include <string>

namespace relcbm {

enum class ErrorCode {
  // template language
  kParseError,
  kUnknownPredicate,
  kArityMismatch,
  kDuplicateHeadVariable,
  kEmptyBody,
  kNonConceptBody,
  kUnboundVariable,
  kEmptyUniverse,
  kUniverseMismatch,
  // numerics
  kShapeMismatch,
  kInvalidTarget,
  kNotScalar,
  kMissingGrad,
  kDimMismatch,
  // models
  kMissingEmbeddings,
  kEmptyGroundingSet,
  kNotDCR,
  // data
  kInvalidCount,
  kSchemaMismatch,
  kTemplateArityMismatch,
  kEmptyBatch,
  kDegenerateLabels,
  kSearchFailed,
  kUnknownAtom,
  kIoError,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kUnknownPredicate: return "UnknownPredicate";
    case ErrorCode::kArityMismatch: return "ArityMismatch";
    case ErrorCode::kDuplicateHeadVariable: return "DuplicateHeadVariable";
    case ErrorCode::kEmptyBody: return "EmptyBody";
    case ErrorCode::kNonConceptBody: return "NonConceptBody";
    case ErrorCode::kUnboundVariable: return "UnboundVariable";
    case ErrorCode::kEmptyUniverse: return "EmptyUniverse";
    case ErrorCode::kUniverseMismatch: return "UniverseMismatch";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kInvalidTarget: return "InvalidTarget";
    case ErrorCode::kNotScalar: return "NotScalar";
    case ErrorCode::kMissingGrad: return "MissingGrad";
    case ErrorCode::kDimMismatch: return "DimMismatch";
    case ErrorCode::kMissingEmbeddings: return "MissingEmbeddings";
    case ErrorCode::kEmptyGroundingSet: return "EmptyGroundingSet";
    case ErrorCode::kNotDCR: return "NotDCR";
    case ErrorCode::kInvalidCount: return "InvalidCount";
    case ErrorCode::kSchemaMismatch: return "SchemaMismatch";
    case ErrorCode::kTemplateArityMismatch: return "TemplateArityMismatch";
    case ErrorCode::kEmptyBatch: return "EmptyBatch";
    case ErrorCode::kDegenerateLabels: return "DegenerateLabels";
    case ErrorCode::kSearchFailed: return "SearchFailed";
    case ErrorCode::kUnknownAtom: return "UnknownAtom";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

/// Single exception type for the library; `code()` identifies the error class.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace relcbm
