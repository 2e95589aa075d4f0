// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "appledefect/checkpoint.hpp"
#include "appledefect/model.hpp"

namespace appledefect {

struct TrainConfig {
  double learning_rate = 1e-4;
  int epochs = 25;
  int batch_size = 32;
  std::uint64_t seed = 42;
  bool train_backbone = false;  // only matters for pretrained (frozen) backbones
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const TrainConfig& c);

struct EpochStats {
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;  // percent

  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

using History = std::vector<EpochStats>;

nlohmann::json history_to_json(const History& h);
History history_from_json(const nlohmann::json& j);

struct Example {
  ClassifierInput inputs;
  int label = 0;
};

using Dataset = std::vector<Example>;

/// Seeded permutation of [0, n) for (seed, epoch), cut into batches; the last may be short.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, std::uint64_t seed, int epoch);

/// Adam with bias correction over a parameter set, keyed by parameter name.
class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : lr_(cfg.learning_rate), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.epsilon) {}

  void step(const std::vector<Param*>& params);
  std::uint64_t steps() const { return t_; }

  void save(Archive& a) const;
  void load(const Archive& a);

 private:
  double lr_, b1_, b2_, eps_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

struct Evaluation {
  std::vector<int> predictions;
  std::vector<int> labels;
  double loss = 0.0;
  double accuracy = 0.0;  // percent
};

Evaluation evaluate(const Classifier& c, const Dataset& data);

struct TrainOptions {
  /// When set, writes history.json, best.ckpt and last.ckpt here.
  std::optional<std::filesystem::path> out_dir;
  /// Continue from a last.ckpt written by an earlier run with the same config.
  std::optional<std::filesystem::path> resume_from;
  /// Stored in checkpoints so callers can tell whose run a checkpoint belongs to.
  nlohmann::json tag = nullptr;
  std::function<void(int epoch, const EpochStats&)> on_epoch;
};

struct TrainResult {
  History history;
  std::optional<std::filesystem::path> best_checkpoint;
  int best_epoch = -1;  // 0-based, -1 when no epoch ran
  double best_val_accuracy = 0.0;
};

TrainResult train(Classifier& classifier, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                  const TrainOptions& options = {});

}  // namespace appledefect
