// SPDX-License-Identifier: Apache-2.0
#include "appledefect/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "appledefect/error.hpp"
#include "appledefect/rng.hpp"

namespace appledefect {

namespace fs = std::filesystem;
using nlohmann::json;

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  try {
    if (j.contains("optimizer") && j["optimizer"].get<std::string>() != "adam") {
      throw Error(ErrorCode::ConfigError, "only the adam optimizer is supported");
    }
    if (j.contains("loss") && j["loss"].get<std::string>() != "categorical_crossentropy") {
      throw Error(ErrorCode::ConfigError, "only categorical_crossentropy loss is supported");
    }
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.train_backbone = j.value("train_backbone", c.train_backbone);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("train config: ") + e.what());
  }
  if (!(c.learning_rate > 0.0) || c.epochs < 0 || c.batch_size < 1) {
    throw Error(ErrorCode::ConfigError, "train config needs learning_rate > 0, epochs >= 0, batch_size >= 1");
  }
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"optimizer", "adam"},
          {"loss", "categorical_crossentropy"},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"train_backbone", c.train_backbone},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon}};
}

json history_to_json(const History& h) {
  json epochs = json::array();
  for (std::size_t i = 0; i < h.size(); ++i) {
    epochs.push_back({{"epoch", i + 1},
                      {"train_loss", h[i].train_loss},
                      {"val_loss", h[i].val_loss},
                      {"val_accuracy", h[i].val_accuracy}});
  }
  return {{"epochs", epochs}};
}

History history_from_json(const json& j) {
  History h;
  for (const auto& e : j.at("epochs")) {
    h.push_back({e.at("train_loss").get<double>(), e.at("val_loss").get<double>(), e.at("val_accuracy").get<double>()});
  }
  return h;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, std::uint64_t seed, int epoch) {
  if (batch_size < 1) throw Error(ErrorCode::ConfigError, "batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(derive_seed(seed, {"batches"}), static_cast<std::uint64_t>(epoch)));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> batches;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < n; start += bs) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + bs)));
  }
  return batches;
}

void Adam::step(const std::vector<Param*>& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (auto* p : params) {
    auto& [m, v] = moments_[p->name];
    if (m.size() != p->value.size()) {
      m.assign(p->value.size(), 0.0);
      v.assign(p->value.size(), 0.0);
    }
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      m[i] = b1_ * m[i] + (1.0 - b1_) * g;
      v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
      p->value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

void Adam::save(Archive& a) const {
  a.meta["adam_step"] = t_;
  for (const auto& [name, mv] : moments_) {
    a.arrays.emplace_back("adam.m/" + name, mv.first);
    a.arrays.emplace_back("adam.v/" + name, mv.second);
  }
}

void Adam::load(const Archive& a) {
  t_ = a.meta.value("adam_step", std::uint64_t{0});
  moments_.clear();
  for (const auto& [name, values] : a.arrays) {
    if (name.rfind("adam.m/", 0) == 0) moments_[name.substr(7)].first = values;
    if (name.rfind("adam.v/", 0) == 0) moments_[name.substr(7)].second = values;
  }
}

namespace {

std::vector<ClassifierInput> gather_inputs(const Dataset& data, const std::vector<std::size_t>& idx) {
  std::vector<ClassifierInput> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data[i].inputs);
  return out;
}

void check_labels(const Dataset& data, int num_classes, const char* which) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].label < 0 || data[i].label >= num_classes) {
      throw Error(ErrorCode::LabelOutOfRange, std::string(which) + " example " + std::to_string(i) + " has label " +
                                                  std::to_string(data[i].label));
    }
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::OutputNotWritable, path.string());
  out << j.dump(2) << "\n";
}

}  // namespace

Evaluation evaluate(const Classifier& c, const Dataset& data) {
  Evaluation e;
  if (data.empty()) return e;
  constexpr std::size_t chunk = 64;
  double total_loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const auto inputs = gather_inputs(data, idx);
    const Eigen::MatrixXd probs = c.forward(inputs, RunMode::eval);
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      const int label = data[idx[static_cast<std::size_t>(r)]].label;
      Eigen::Index pred;
      probs.row(r).maxCoeff(&pred);
      e.predictions.push_back(static_cast<int>(pred));
      e.labels.push_back(label);
      total_loss -= std::log(std::max(probs(r, label), 1e-300));
      if (pred == label) ++correct;
    }
  }
  e.loss = total_loss / static_cast<double>(data.size());
  e.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
  return e;
}

TrainResult train(Classifier& classifier, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                  const TrainOptions& options) {
  TrainResult result;
  if (cfg.epochs > 0 && (train_set.empty() || val_set.empty())) {
    throw Error(ErrorCode::EmptyDataset, train_set.empty() ? "training set is empty" : "validation set is empty");
  }
  const int num_classes = classifier.spec().head.num_classes;
  check_labels(train_set, num_classes, "training");
  check_labels(val_set, num_classes, "validation");
  if (cfg.train_backbone) classifier.set_backbone_trainable(true);

  std::vector<Param*> trainable;
  bool backbone_trainable = false;
  const auto head = classifier.head_parameters();
  for (auto* p : classifier.parameters()) {
    if (!p->trainable) continue;
    trainable.push_back(p);
    if (std::find(head.begin(), head.end(), p) == head.end()) backbone_trainable = true;
  }

  Adam adam(cfg);
  int start_epoch = 0;
  if (options.resume_from) {
    const Archive a = load_archive(*options.resume_from);
    assign_weights(classifier, a);
    adam.load(a);
    result.history = history_from_json(a.meta.at("history"));
    result.best_epoch = a.meta.value("best_epoch", -1);
    result.best_val_accuracy = a.meta.value("best_val_accuracy", 0.0);
    start_epoch = static_cast<int>(result.history.size());
  }
  if (options.out_dir) {
    std::error_code ec;
    fs::create_directories(*options.out_dir, ec);
    if (result.best_epoch >= 0) result.best_checkpoint = *options.out_dir / "best.ckpt";
  }

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto batches = make_batches(train_set.size(), cfg.batch_size, cfg.seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto inputs = gather_inputs(train_set, batches[b]);
      std::vector<int> labels;
      for (auto i : batches[b]) labels.push_back(train_set[i].label);
      const auto dropout_seed = derive_seed(derive_seed(cfg.seed, {"dropout"}), static_cast<std::uint64_t>(epoch), b);
      const double loss = classifier.loss_and_gradients(inputs, labels, RunMode::train, dropout_seed,
                                                        backbone_trainable);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::NonFiniteLoss,
                    "epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(b + 1));
      }
      adam.step(trainable);
      loss_sum += loss * static_cast<double>(batches[b].size());
    }
    const auto val = evaluate(classifier, val_set);
    EpochStats stats{loss_sum / static_cast<double>(train_set.size()), val.loss, val.accuracy};
    result.history.push_back(stats);
    const bool improved = result.best_epoch < 0 || stats.val_accuracy > result.best_val_accuracy;
    if (improved) {
      result.best_epoch = epoch;
      result.best_val_accuracy = stats.val_accuracy;
    }
    if (options.on_epoch) options.on_epoch(epoch, stats);

    if (options.out_dir) {
      if (improved) {
        Archive best = classifier.to_archive();
        best.meta["epoch"] = epoch + 1;
        best.meta["val_accuracy"] = stats.val_accuracy;
        best.meta["tag"] = options.tag;
        save_archive(*options.out_dir / "best.ckpt", best);
        result.best_checkpoint = *options.out_dir / "best.ckpt";
      }
      Archive last = classifier.to_archive();
      adam.save(last);
      last.meta["history"] = history_to_json(result.history);
      last.meta["best_epoch"] = result.best_epoch;
      last.meta["best_val_accuracy"] = result.best_val_accuracy;
      last.meta["train_config"] = to_json(cfg);
      last.meta["tag"] = options.tag;
      save_archive(*options.out_dir / "last.ckpt", last);
      write_json(*options.out_dir / "history.json", history_to_json(result.history));
    }
  }
  if (options.out_dir && cfg.epochs == 0) write_json(*options.out_dir / "history.json", history_to_json({}));
  return result;
}

}  // namespace appledefect
