// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "appledefect/checkpoint.hpp"
#include "appledefect/image.hpp"
#include "appledefect/rng.hpp"

namespace appledefect {

enum class BackboneName { tiny, mobilenet_v1, densenet121, resnet50, vgg19 };

std::string_view to_string(BackboneName n);
std::optional<BackboneName> parse_backbone_name(std::string_view s);
/// Table label, e.g. "MobileNetV1".
std::string display_name(BackboneName n);
/// Channels of the final feature map of each architecture.
int native_feature_depth(BackboneName n);

struct BackboneSpec {
  BackboneName name = BackboneName::tiny;
  bool pretrained = false;
  int input_height = 224;
  int input_width = 224;
  int feature_depth = 64;

  friend bool operator==(const BackboneSpec&, const BackboneSpec&) = default;
};

/// Spec for `name` with its native feature depth and the given input size.
BackboneSpec default_backbone(BackboneName name, int input_height = 224, int input_width = 224);

struct HeadSpec {
  std::vector<int> hidden_sizes = {256, 128};
  double dropout_rate = 0.5;
  int num_classes = 3;

  friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

enum class InputMode { single, multi };

struct ClassifierSpec {
  InputMode mode = InputMode::single;
  BackboneSpec backbone_a;
  std::optional<BackboneSpec> backbone_b;
  bool share_weights = false;
  HeadSpec head;

  friend bool operator==(const ClassifierSpec&, const ClassifierSpec&) = default;
};

nlohmann::json to_json(const BackboneSpec& s);
nlohmann::json to_json(const ClassifierSpec& s);
ClassifierSpec classifier_spec_from_json(const nlohmann::json& j);
/// Throws SpecMismatch on violated invariants.
void validate(const ClassifierSpec& s);

enum class RunMode { train, eval };

/// A named trainable array with its gradient accumulator.
struct Param {
  std::string name;
  std::vector<double> value;
  std::vector<double> grad;
  bool trainable = true;
};

struct ConvLayerSpec {
  int in_channels;
  int out_channels;
  int kernel = 3;
  int stride = 2;
  int pad = 1;
};

/// Join two feature maps of equal spatial size along the channel axis.
ImageF concat_depth(const ImageF& a, const ImageF& b);

/// Sequential conv+ReLU feature extractor. `tiny` is built in; the named
/// architectures are adapters over exported conv stacks found in the weight cache.
class Backbone {
 public:
  struct Cache {
    std::vector<ImageF> activations;  // input (normalized) then each layer's output
    std::vector<Eigen::MatrixXd> cols;
  };

  Backbone(BackboneSpec spec, std::vector<ConvLayerSpec> layers, const std::string& prefix, std::uint64_t seed);

  const BackboneSpec& spec() const { return spec_; }
  const std::vector<ConvLayerSpec>& layers() const { return layers_; }
  std::pair<int, int> output_hw() const;  // (H', W')

  /// (H, W, 3) in [0, 1] -> (H', W', D).
  ImageF forward(const ImageF& input, Cache* cache = nullptr) const;
  /// Accumulates parameter gradients from dL/d(output).
  void backward(const ImageF& grad_output, const Cache& cache);

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

 private:
  ImageF normalize(const ImageF& input) const;

  BackboneSpec spec_;
  std::vector<ConvLayerSpec> layers_;
  std::vector<Param> params_;  // weight, bias per layer
};

/// Environment variable naming the pretrained weight cache directory.
inline constexpr const char* kWeightCacheEnv = "APPLEDEFECT_WEIGHTS";

/// tiny: four 5x5 stride-2 convs (16/32/64/64) with ReLU on inputs mapped to [-1, 1]. Named backbones load
/// `<cache>/<name>.adw`; absent asset -> PretrainedWeightsUnavailable.
Backbone build_backbone(const BackboneSpec& spec, std::uint64_t seed, const std::string& prefix = "backbone",
                        std::optional<std::filesystem::path> weight_cache = std::nullopt);

/// Writes a backbone's conv stack as a weight asset loadable by build_backbone.
void export_backbone_asset(const Backbone& b, const std::filesystem::path& path);

/// Global average pool -> [dense + ReLU + dropout] x 2 -> dense -> softmax.
class DenseHead {
 public:
  struct Cache {
    Eigen::VectorXd pooled;
    std::vector<Eigen::VectorXd> hidden;  // post-ReLU, pre-dropout
    std::vector<Eigen::VectorXd> keep;    // dropout multipliers (0 or 1/(1-p))
    Eigen::VectorXd logits;
  };

  DenseHead(const HeadSpec& spec, int in_features, std::uint64_t seed);

  Eigen::VectorXd logits(const Eigen::VectorXd& pooled, RunMode mode, Rng* dropout, Cache* cache) const;
  /// Returns dL/d(pooled) and accumulates parameter gradients.
  Eigen::VectorXd backward(const Eigen::VectorXd& grad_logits, const Cache& cache);

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  int in_features() const { return in_features_; }

 private:
  HeadSpec spec_;
  int in_features_;
  std::vector<Param> params_;  // (weight, bias) per dense layer, weights row-major (in x out)
};

/// One image per branch, each (H, W, 3) in [0, 1].
using ClassifierInput = std::vector<ImageF>;

class Classifier;
namespace detail {
/// Wires prebuilt branches to a freshly initialized head; checks branch shapes.
Classifier assemble_classifier(const ClassifierSpec& spec, std::vector<Backbone> branches, std::uint64_t head_seed);
}  // namespace detail

class Classifier {
 public:
  const ClassifierSpec& spec() const { return spec_; }

  /// Probabilities, one row per input. Train mode applies dropout drawn from `dropout_seed`.
  Eigen::MatrixXd forward(const std::vector<ClassifierInput>& batch, RunMode mode,
                          std::uint64_t dropout_seed = 0) const;

  /// Mean cross-entropy over the batch; zeroes then fills gradients of every
  /// trainable parameter (backbones only when include_backbones).
  double loss_and_gradients(const std::vector<ClassifierInput>& batch, const std::vector<int>& labels, RunMode mode,
                            std::uint64_t dropout_seed, bool include_backbones);

  /// Mean cross-entropy without touching gradients.
  double loss(const std::vector<ClassifierInput>& batch, const std::vector<int>& labels, RunMode mode,
              std::uint64_t dropout_seed = 0) const;

  /// Depth of the fused feature map fed to the head.
  int fused_depth() const { return head_.in_features(); }
  ImageF fused_features(const ClassifierInput& input) const;

  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;
  std::vector<Param*> head_parameters();
  std::size_t head_parameter_count() const;
  std::size_t branch_parameter_count() const;
  std::size_t branch_count() const { return branches_.size(); }
  const Backbone& branch(std::size_t i) const { return branches_.at(i); }

  /// Freezes or unfreezes backbone parameters.
  void set_backbone_trainable(bool trainable);

  Archive to_archive() const;
  void save_weights(const std::filesystem::path& path) const;

 private:
  friend Classifier detail::assemble_classifier(const ClassifierSpec&, std::vector<Backbone>, std::uint64_t);
  Classifier(ClassifierSpec spec, std::vector<Backbone> branches, DenseHead head)
      : spec_(std::move(spec)), branches_(std::move(branches)), head_(std::move(head)) {}

  void check_input(const ClassifierInput& input) const;
  const Backbone& branch_for(std::size_t input_index) const;
  Eigen::VectorXd sample_logits(const ClassifierInput& input, RunMode mode, Rng* dropout,
                                std::vector<Backbone::Cache>* branch_caches, std::vector<ImageF>* features,
                                DenseHead::Cache* head_cache) const;

  ClassifierSpec spec_;
  std::vector<Backbone> branches_;  // 1 for single or shared multi, 2 for independent multi
  DenseHead head_;
};

Classifier build_classifier(const ClassifierSpec& spec, std::uint64_t seed,
                            std::optional<std::filesystem::path> weight_cache = std::nullopt);
/// mode must be single.
Classifier build_single_input(const ClassifierSpec& spec, std::uint64_t seed,
                              std::optional<std::filesystem::path> weight_cache = std::nullopt);
/// mode must be multi; branches must produce equal spatial sizes.
Classifier build_multi_input(const ClassifierSpec& spec, std::uint64_t seed,
                             std::optional<std::filesystem::path> weight_cache = std::nullopt);

/// Copies parameter values from the archive after checking its spec equals `spec`.
void assign_weights(Classifier& c, const Archive& a);
Classifier load_weights(const ClassifierSpec& spec, const std::filesystem::path& path,
                        std::optional<std::filesystem::path> weight_cache = std::nullopt);

Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

}  // namespace appledefect
