// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "appledefect/dataset.hpp"
#include "appledefect/evalreport.hpp"
#include "appledefect/registration.hpp"
#include "appledefect/synthgen.hpp"
#include "appledefect/trainer.hpp"

namespace appledefect {

inline constexpr const char* kArtifactVersion = "appledefect-1";

enum class MatcherKind { builtin, sidecar };

struct RegistrationStage {
  bool enabled = false;
  MatcherKind matcher = MatcherKind::builtin;
  MatcherConfig config;
};

struct MaskStage {
  bool enabled = false;
  std::size_t min_area = 20;
  int connectivity = 8;
};

struct PipelineConfig {
  std::optional<std::filesystem::path> manifest;  // ingest this instead of synthesizing
  std::filesystem::path output_root = "runs/default";
  std::optional<std::filesystem::path> weight_cache;
  std::uint64_t master_seed = 42;
  GenConfig synth;  // master_seed follows the pipeline's unless set explicitly
  RegistrationStage registration;
  MaskStage maskproc;
  SplitSpec split;
  TrainConfig train;
  int input_width = 224;
  int input_height = 224;
  HeadSpec head;
  bool share_weights = false;
  std::vector<BackboneName> models = {BackboneName::tiny};
  std::vector<ExperimentArm> arms = {kAllArms.begin(), kAllArms.end()};
  unsigned jobs = 1;
};

/// Fields absent from `j` keep their value in `base`. A top-level "master_seed"
/// reseeds synthesis and the split unless their own sections name a seed.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig base = {});
nlohmann::json to_json(const PipelineConfig& c);
MatrixConfig matrix_config(const PipelineConfig& c);

/// Writes `<dir>/run_meta.json`: command, config, its hash, seed and artifact version.
void write_run_meta(const std::filesystem::path& dir, const std::string& command, const nlohmann::json& config,
                    std::uint64_t master_seed);

/// Path of the sidecar correspondence file for a record: `<narrowband stem>.matches.json`.
std::filesystem::path sidecar_path(const Manifest& m, const CaptureRecord& r);

struct RegistrationOutcome {
  Manifest manifest;       // registered narrowband plus visible and mask cropped to the same frame
  nlohmann::json report;   // {"records": [{fruit_id, view_index, status, matches, inliers, mean_residual, h}]}
  std::size_t failures = 0;
};

/// Registers every narrowband image onto its visible partner and writes the results under out_dir.
/// A record whose registration fails keeps an identity warp and is reported with status "failed".
RegistrationOutcome register_manifest(const Manifest& m, const std::filesystem::path& out_dir,
                                      const RegistrationStage& stage, unsigned jobs = 1);

/// Applies filter_regions to every mask and writes the filtered masks under out_dir.
Manifest filter_manifest_masks(const Manifest& m, const std::filesystem::path& out_dir, const MaskStage& stage,
                               unsigned jobs = 1);

struct PipelineOutcome {
  Manifest manifest;  // after all preprocessing stages
  std::vector<ExperimentResult> results;
  std::vector<std::string> cached_stages;
};

/// synth (or ingest) -> register -> maskproc -> split -> train/eval -> tables, under output_root.
/// Stages whose stamp matches their inputs are reused.
PipelineOutcome run_pipeline(const PipelineConfig& c, const std::function<void(const std::string&)>& log = {});

}  // namespace appledefect
