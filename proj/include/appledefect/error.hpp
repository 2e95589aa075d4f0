// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace appledefect {

enum class ErrorCode {
  ManifestNotFound,
  ManifestParseError,
  DegenerateSplit,
  InvalidBand,
  OutputNotWritable,
  InsufficientCorrespondences,
  DegenerateConfiguration,
  NoModelFound,
  SingularHomography,
  MatchFailure,
  PretrainedWeightsUnavailable,
  SpecMismatch,
  BranchShapeMismatch,
  ShapeMismatch,
  CorruptCheckpoint,
  EmptyDataset,
  LabelOutOfRange,
  NonFiniteLoss,
  EmptyEvaluation,
  LengthMismatch,
  MissingModality,
  UnknownLayout,
  IoError,
  ConfigError,
};

std::string_view to_string(ErrorCode code);

/// Domain error raised by every module. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace appledefect
