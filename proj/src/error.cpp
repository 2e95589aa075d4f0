// SPDX-License-Identifier: Apache-2.0
#include "appledefect/error.hpp"

namespace appledefect {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ManifestNotFound: return "ManifestNotFound";
    case ErrorCode::ManifestParseError: return "ManifestParseError";
    case ErrorCode::DegenerateSplit: return "DegenerateSplit";
    case ErrorCode::InvalidBand: return "InvalidBand";
    case ErrorCode::OutputNotWritable: return "OutputNotWritable";
    case ErrorCode::InsufficientCorrespondences: return "InsufficientCorrespondences";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::NoModelFound: return "NoModelFound";
    case ErrorCode::SingularHomography: return "SingularHomography";
    case ErrorCode::MatchFailure: return "MatchFailure";
    case ErrorCode::PretrainedWeightsUnavailable: return "PretrainedWeightsUnavailable";
    case ErrorCode::SpecMismatch: return "SpecMismatch";
    case ErrorCode::BranchShapeMismatch: return "BranchShapeMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::EmptyEvaluation: return "EmptyEvaluation";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::MissingModality: return "MissingModality";
    case ErrorCode::UnknownLayout: return "UnknownLayout";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

}  // namespace appledefect
