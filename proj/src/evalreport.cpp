// SPDX-License-Identifier: Apache-2.0
#include "appledefect/evalreport.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>

#include "appledefect/error.hpp"
#include "appledefect/hash.hpp"
#include "appledefect/image.hpp"
#include "appledefect/maskproc.hpp"
#include "appledefect/parallel.hpp"
#include "appledefect/rng.hpp"

namespace appledefect {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(ExperimentArm a) {
  switch (a) {
    case ExperimentArm::single_nb: return "single_nb";
    case ExperimentArm::single_vis: return "single_vis";
    case ExperimentArm::multi_nb_mask: return "multi_nb_mask";
    case ExperimentArm::multi_vis_mask: return "multi_vis_mask";
    case ExperimentArm::multi_nb_vis: return "multi_nb_vis";
  }
  return "?";
}

std::optional<ExperimentArm> parse_arm(std::string_view s) {
  for (auto a : kAllArms) {
    if (to_string(a) == s) return a;
  }
  return std::nullopt;
}

std::vector<Modality> arm_inputs(ExperimentArm a) {
  switch (a) {
    case ExperimentArm::single_nb: return {Modality::narrowband};
    case ExperimentArm::single_vis: return {Modality::visible};
    case ExperimentArm::multi_nb_mask: return {Modality::narrowband, Modality::mask};
    case ExperimentArm::multi_vis_mask: return {Modality::visible, Modality::mask};
    case ExperimentArm::multi_nb_vis: return {Modality::narrowband, Modality::visible};
  }
  return {};
}

bool is_multi(ExperimentArm a) { return arm_inputs(a).size() == 2; }

void check_modalities(const Manifest& m, ExperimentArm arm) {
  for (auto mod : arm_inputs(arm)) {
    if (mod == Modality::mask && !m.has_masks()) {
      throw Error(ErrorCode::MissingModality, std::string("arm ") + std::string(to_string(arm)) +
                                                  " needs defect masks but the manifest has records without one");
    }
  }
}

namespace {

ImageF load_image_input(const fs::path& path, int width, int height) {
  const Image img = read_png(path);
  ImageF f = resize_bilinear(to_unit(img), width, height);
  return f.channels == 3 ? f : to_three_channels(f);
}

}  // namespace

ClassifierInput load_example(const Manifest& m, const CaptureRecord& r, ExperimentArm arm, int width, int height) {
  ClassifierInput in;
  for (auto mod : arm_inputs(arm)) {
    switch (mod) {
      case Modality::narrowband:
        in.push_back(load_image_input(m.resolve(r.narrowband_path), width, height));
        break;
      case Modality::visible:
        in.push_back(load_image_input(m.resolve(r.visible_path), width, height));
        break;
      case Modality::mask:
        if (!r.mask_path) {
          throw Error(ErrorCode::MissingModality, "record " + r.fruit_id + "/" + std::to_string(r.view_index) +
                                                      " has no mask");
        }
        in.push_back(mask_to_model_input(mask_from_image(read_png(m.resolve(*r.mask_path))), width, height));
        break;
    }
  }
  return in;
}

Dataset load_examples(const Manifest& m, ExperimentArm arm, int width, int height, unsigned jobs) {
  check_modalities(m, arm);
  Dataset out(m.records.size());
  parallel_for(m.records.size(), jobs, [&](std::size_t i) {
    out[i].inputs = load_example(m, m.records[i], arm, width, height);
    out[i].label = m.label_of(m.records[i]);
  });
  return out;
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw Error(ErrorCode::LengthMismatch, std::to_string(predictions.size()) + " predictions vs " +
                                               std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw Error(ErrorCode::EmptyEvaluation, "no predictions to score");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(labels.size());
}

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels, int num_classes) {
  if (predictions.size() != labels.size()) {
    throw Error(ErrorCode::LengthMismatch, std::to_string(predictions.size()) + " predictions vs " +
                                               std::to_string(labels.size()) + " labels");
  }
  ConfusionMatrix cm(static_cast<std::size_t>(num_classes), std::vector<long>(static_cast<std::size_t>(num_classes)));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (int v : {labels[i], predictions[i]}) {
      if (v < 0 || v >= num_classes) {
        throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(v) + " at index " + std::to_string(i));
      }
    }
    ++cm[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
  }
  return cm;
}

json to_json(const ExperimentResult& r) {
  json j = {{"model_name", r.model_name},
            {"arm", std::string(to_string(r.arm))},
            {"accuracy_pct", r.accuracy_pct},
            {"final_accuracy_pct", r.final_accuracy_pct},
            {"best_epoch", r.best_epoch},
            {"history_path", r.history_path.generic_string()},
            {"cache_key", r.cache_key}};
  if (!r.confusion.empty()) j["confusion"] = r.confusion;
  return j;
}

ExperimentResult experiment_result_from_json(const json& j) {
  ExperimentResult r;
  try {
    r.model_name = j.at("model_name").get<std::string>();
    const auto arm = parse_arm(j.at("arm").get<std::string>());
    if (!arm) throw Error(ErrorCode::ConfigError, "unknown arm " + j.at("arm").get<std::string>());
    r.arm = *arm;
    r.accuracy_pct = j.at("accuracy_pct").get<double>();
    r.final_accuracy_pct = j.value("final_accuracy_pct", r.accuracy_pct);
    r.best_epoch = j.value("best_epoch", 0);
    if (j.contains("confusion")) r.confusion = j["confusion"].get<ConfusionMatrix>();
    r.history_path = j.value("history_path", std::string());
    r.cache_key = j.value("cache_key", std::string());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, std::string("bad result record: ") + e.what());
  }
  return r;
}

void save_result(const fs::path& path, const ExperimentResult& r) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(ErrorCode::OutputNotWritable, path.string());
    out << to_json(r).dump(2) << "\n";
  }
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::OutputNotWritable, path.string() + ": " + ec.message());
}

ExperimentResult load_result(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  try {
    return experiment_result_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, path.string() + ": " + e.what());
  }
}

std::vector<ExperimentResult> load_results(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::IoError, "results directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& model : fs::directory_iterator(dir)) {
    if (!model.is_directory()) continue;
    for (const auto& arm : fs::directory_iterator(model.path())) {
      if (arm.is_directory() && fs::exists(arm.path() / "result.json")) files.push_back(arm.path() / "result.json");
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<ExperimentResult> out;
  for (const auto& f : files) out.push_back(load_result(f));
  return out;
}

ClassifierSpec classifier_spec_for(BackboneName model, ExperimentArm arm, const MatrixConfig& cfg) {
  ClassifierSpec s;
  s.backbone_a = default_backbone(model, cfg.input_height, cfg.input_width);
  s.backbone_a.pretrained = model != BackboneName::tiny;
  s.head = cfg.head;
  if (is_multi(arm)) {
    s.mode = InputMode::multi;
    s.backbone_b = s.backbone_a;
    s.share_weights = cfg.share_weights;
  }
  return s;
}

std::string manifest_content_hash(const Manifest& m) {
  Fnv1a h;
  h.update(manifest_to_json(m, m.root));
  for (const auto& r : m.records) {
    h.update(hash_file(m.resolve(r.visible_path)));
    h.update(hash_file(m.resolve(r.narrowband_path)));
    if (r.mask_path) h.update(hash_file(m.resolve(*r.mask_path)));
  }
  return h.hex();
}

namespace {

struct Cell {
  BackboneName model;
  ExperimentArm arm;
};

std::optional<ExperimentResult> cached_result(const fs::path& dir, const std::string& key) {
  const fs::path p = dir / "result.json";
  if (!fs::exists(p)) return std::nullopt;
  try {
    auto r = load_result(p);
    if (r.cache_key == key) return r;
  } catch (const Error&) {
  }
  return std::nullopt;
}

bool resumable(const fs::path& last, const std::string& key) {
  if (!fs::exists(last)) return false;
  try {
    const auto a = load_archive(last);
    return a.meta.contains("tag") && a.meta["tag"].is_object() && a.meta["tag"].value("cache_key", "") == key;
  } catch (const Error&) {
    return false;
  }
}

}  // namespace

std::vector<ExperimentResult> run_experiment_matrix(const Manifest& m, const MatrixConfig& cfg) {
  for (auto arm : cfg.arms) check_modalities(m, arm);
  std::vector<Cell> cells;
  for (auto model : cfg.models) {
    for (auto arm : cfg.arms) cells.push_back({model, arm});
  }
  std::vector<ExperimentResult> results(cells.size());
  if (cells.empty()) return results;

  const auto [train_m, val_m] = split_grouped(m, cfg.split);
  const std::string data_hash = manifest_content_hash(m);
  std::mutex log_mu;
  auto log = [&](const std::string& s) {
    if (!cfg.log) return;
    std::lock_guard lock(log_mu);
    cfg.log(s);
  };

  // Inputs depend only on the arm; load each arm once.
  std::map<ExperimentArm, std::pair<Dataset, Dataset>> data;
  const unsigned cell_jobs = std::min<unsigned>(std::max(1u, cfg.jobs), static_cast<unsigned>(cells.size()));

  std::vector<std::string> keys(cells.size());
  std::vector<std::uint64_t> seeds(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto [model, arm] = cells[i];
    const std::string model_key(to_string(model));
    const std::string arm_key(to_string(arm));
    seeds[i] = derive_seed(cfg.master_seed, {"cell", model_key, arm_key});
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(seeds[i], {"train"});
    Fnv1a h;
    h.update(to_json(classifier_spec_for(model, arm, cfg)).dump());
    h.update(arm_key);
    h.update(to_json(tc).dump());
    h.update(json{{"val_fraction", cfg.split.val_fraction}, {"seed", cfg.split.seed}}.dump());
    h.update(data_hash);
    keys[i] = h.hex();
    const fs::path dir = cfg.results_dir / model_key / arm_key;
    if (auto r = cached_result(dir, keys[i])) {
      results[i] = *r;
      log(model_key + "/" + arm_key + ": cached");
    } else if (!data.contains(arm)) {
      data[arm] = {load_examples(train_m, arm, cfg.input_width, cfg.input_height, cfg.jobs),
                   load_examples(val_m, arm, cfg.input_width, cfg.input_height, cfg.jobs)};
    }
  }

  parallel_for(cells.size(), cell_jobs, [&](std::size_t i) {
    if (!results[i].cache_key.empty()) return;
    const auto [model, arm] = cells[i];
    const std::string model_key(to_string(model));
    const std::string arm_key(to_string(arm));
    const fs::path dir = cfg.results_dir / model_key / arm_key;
    const auto& [train_set, val_set] = data.at(arm);
    try {
      const ClassifierSpec spec = classifier_spec_for(model, arm, cfg);
      Classifier c = build_classifier(spec, derive_seed(seeds[i], {"init"}), cfg.weight_cache);
      TrainConfig tc = cfg.train;
      tc.seed = derive_seed(seeds[i], {"train"});
      TrainOptions opts;
      opts.out_dir = dir;
      opts.tag = {{"cache_key", keys[i]}, {"model", model_key}, {"arm", arm_key}};
      if (resumable(dir / "last.ckpt", keys[i])) opts.resume_from = dir / "last.ckpt";
      opts.on_epoch = [&](int epoch, const EpochStats& s) {
        std::ostringstream os;
        os << model_key << "/" << arm_key << " epoch " << epoch + 1 << "/" << tc.epochs
           << " train_loss " << s.train_loss << " val_loss " << s.val_loss << " val_acc " << s.val_accuracy;
        log(os.str());
      };
      const TrainResult tr = train(c, train_set, val_set, tc, opts);

      ExperimentResult r;
      r.model_name = display_name(model);
      r.arm = arm;
      r.cache_key = keys[i];
      r.history_path = "history.json";
      if (!tr.history.empty()) {
        r.accuracy_pct = tr.best_val_accuracy;
        r.final_accuracy_pct = tr.history.back().val_accuracy;
        r.best_epoch = tr.best_epoch + 1;
      }
      const Classifier best = tr.best_checkpoint ? load_weights(spec, *tr.best_checkpoint, cfg.weight_cache) : c;
      const Evaluation ev = evaluate(best, val_set);
      if (tr.history.empty()) r.accuracy_pct = r.final_accuracy_pct = ev.accuracy;
      r.confusion = confusion_matrix(ev.predictions, ev.labels, spec.head.num_classes);
      save_result(dir / "result.json", r);
      results[i] = r;
      log(model_key + "/" + arm_key + ": best val accuracy " + format_percent(r.accuracy_pct));
    } catch (const Error& e) {
      throw Error(e.code(), "cell " + model_key + "/" + arm_key + ": " + e.what());
    }
  });
  return results;
}

TableLayout parse_layout(std::string_view s) {
  if (s == "table1") return TableLayout::table1;
  if (s == "table2") return TableLayout::table2;
  if (s == "table3") return TableLayout::table3;
  throw Error(ErrorCode::UnknownLayout, "unknown table layout '" + std::string(s) + "'");
}

std::optional<TableFormat> parse_format(std::string_view s) {
  if (s == "text") return TableFormat::text;
  if (s == "csv") return TableFormat::csv;
  return std::nullopt;
}

std::string format_percent(double v) {
  const auto cents = static_cast<long long>(std::floor(v * 100.0 + 0.5 + 1e-9));
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s%lld.%02lld", cents < 0 ? "-" : "", std::llabs(cents) / 100,
                std::llabs(cents) % 100);
  return buf;
}

namespace {

struct Column {
  ExperimentArm arm;
  const char* title;
};

std::vector<Column> columns_of(TableLayout layout) {
  switch (layout) {
    case TableLayout::table1:
      return {{ExperimentArm::single_nb, "660 nm spectrum (%)"}, {ExperimentArm::single_vis, "Visible spectrum (%)"}};
    case TableLayout::table2:
      return {{ExperimentArm::multi_nb_mask, "660 nm spectrum + defect masks (%)"},
              {ExperimentArm::multi_vis_mask, "Visible spectrum + defect masks (%)"}};
    case TableLayout::table3:
      return {{ExperimentArm::multi_nb_vis, "660 nm + visible spectrum (%)"}};
  }
  throw Error(ErrorCode::UnknownLayout, "unknown table layout");
}

std::string row_label(const std::string& model_name) {
  if (auto b = parse_backbone_name(model_name)) return display_name(*b);
  return model_name;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

}  // namespace

std::string emit_table(std::span<const ExperimentResult> results, TableLayout layout, TableFormat format) {
  const auto cols = columns_of(layout);
  std::map<std::string, std::map<ExperimentArm, double>> cells;
  for (const auto& r : results) {
    for (const auto& c : cols) {
      if (c.arm == r.arm) cells[row_label(r.model_name)][r.arm] = r.accuracy_pct;
    }
  }
  std::vector<std::string> rows;
  const std::vector<std::string> fixed = {"MobileNetV1", "DenseNet121", "ResNet50", "VGG19"};
  for (const auto& name : fixed) {
    if (cells.contains(name)) rows.push_back(name);
  }
  for (const auto& [name, _] : cells) {  // std::map keeps extras alphabetical
    if (std::find(fixed.begin(), fixed.end(), name) == fixed.end()) rows.push_back(name);
  }

  const std::string sep = format == TableFormat::text ? " | " : ",";
  auto field = [&](const std::string& s) { return format == TableFormat::csv ? csv_field(s) : s; };
  std::string out = "Model";
  for (const auto& c : cols) out += sep + field(c.title);
  out += "\n";
  for (const auto& name : rows) {
    out += field(name);
    for (const auto& c : cols) {
      const auto& row = cells[name];
      const auto it = row.find(c.arm);
      out += sep + (it == row.end() ? std::string("—") : format_percent(it->second));
    }
    out += "\n";
  }
  return out;
}

}  // namespace appledefect
