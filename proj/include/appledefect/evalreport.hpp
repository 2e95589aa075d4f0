// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "appledefect/dataset.hpp"
#include "appledefect/model.hpp"
#include "appledefect/trainer.hpp"

namespace appledefect {

enum class ExperimentArm { single_nb, single_vis, multi_nb_mask, multi_vis_mask, multi_nb_vis };

inline constexpr std::array<ExperimentArm, 5> kAllArms = {ExperimentArm::single_nb, ExperimentArm::single_vis,
                                                          ExperimentArm::multi_nb_mask, ExperimentArm::multi_vis_mask,
                                                          ExperimentArm::multi_nb_vis};

std::string_view to_string(ExperimentArm a);
std::optional<ExperimentArm> parse_arm(std::string_view s);

enum class Modality { narrowband, visible, mask };

/// Record field feeding each branch, in branch order.
std::vector<Modality> arm_inputs(ExperimentArm a);
bool is_multi(ExperimentArm a);

/// Loads one record as classifier input for `arm`: images resized bilinearly to
/// (width, height), narrowband replicated to three channels, masks nearest-resized.
ClassifierInput load_example(const Manifest& m, const CaptureRecord& r, ExperimentArm arm, int width, int height);
Dataset load_examples(const Manifest& m, ExperimentArm arm, int width, int height, unsigned jobs = 1);

/// Throws MissingModality if the manifest cannot feed `arm`.
void check_modalities(const Manifest& m, ExperimentArm arm);

double accuracy(std::span<const int> predictions, std::span<const int> labels);

using ConfusionMatrix = std::vector<std::vector<long>>;
/// Entry (i, j) counts true class i predicted as j.
ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels, int num_classes = 3);

struct ExperimentResult {
  std::string model_name;  // display name, e.g. "MobileNetV1"
  ExperimentArm arm = ExperimentArm::single_nb;
  double accuracy_pct = 0.0;        // best-epoch validation accuracy
  double final_accuracy_pct = 0.0;  // last-epoch validation accuracy
  int best_epoch = 0;               // 1-based
  ConfusionMatrix confusion;        // of the best checkpoint on the validation set; empty if unknown
  std::filesystem::path history_path;
  std::string cache_key;
};

nlohmann::json to_json(const ExperimentResult& r);
ExperimentResult experiment_result_from_json(const nlohmann::json& j);
void save_result(const std::filesystem::path& path, const ExperimentResult& r);
ExperimentResult load_result(const std::filesystem::path& path);
/// Every `<model>/<arm>/result.json` under dir, in path order.
std::vector<ExperimentResult> load_results(const std::filesystem::path& dir);

struct MatrixConfig {
  std::vector<BackboneName> models = {BackboneName::tiny};
  std::vector<ExperimentArm> arms = {kAllArms.begin(), kAllArms.end()};
  TrainConfig train;  // seed is replaced per cell
  SplitSpec split;
  int input_width = 224;
  int input_height = 224;
  HeadSpec head;
  bool share_weights = false;
  std::uint64_t master_seed = 42;
  std::filesystem::path results_dir = "results";
  std::optional<std::filesystem::path> weight_cache;
  unsigned jobs = 1;
  std::function<void(const std::string&)> log;
};

/// Named backbones are pretrained adapters; tiny is trained from scratch.
ClassifierSpec classifier_spec_for(BackboneName model, ExperimentArm arm, const MatrixConfig& cfg);

/// Hash of the manifest's canonical JSON and the bytes of every file it references.
std::string manifest_content_hash(const Manifest& m);

/// Trains and evaluates each (model, arm) cell under results_dir/<model>/<arm>/.
/// Cells whose result.json carries a matching cache key are read back instead of rerun.
std::vector<ExperimentResult> run_experiment_matrix(const Manifest& m, const MatrixConfig& cfg);

enum class TableLayout { table1, table2, table3 };
enum class TableFormat { text, csv };

TableLayout parse_layout(std::string_view s);  // UnknownLayout
std::optional<TableFormat> parse_format(std::string_view s);

/// Half-up to two decimals: 98.8 -> "98.80".
std::string format_percent(double v);

std::string emit_table(std::span<const ExperimentResult> results, TableLayout layout, TableFormat format);

}  // namespace appledefect
