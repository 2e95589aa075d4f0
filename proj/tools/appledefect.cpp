// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "appledefect/checkpoint.hpp"
#include "appledefect/dataset.hpp"
#include "appledefect/error.hpp"
#include "appledefect/evalreport.hpp"
#include "appledefect/model.hpp"
#include "appledefect/parallel.hpp"
#include "appledefect/pipeline.hpp"
#include "appledefect/synthgen.hpp"
#include "appledefect/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace appledefect;

namespace {

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ConfigError, p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error(ErrorCode::OutputNotWritable, p.string());
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

// Command-line overrides shared by several subcommands; unset values leave the config alone.
struct Common {
  std::optional<std::string> config;
  unsigned jobs = default_jobs();
  std::string command;
};

PipelineConfig load_config(const Common& o) {
  PipelineConfig c;
  if (!o.config) return c;
  const json j = read_json(*o.config);
  c = pipeline_config_from_json(j, c);
  // A bare TrainConfig or GenConfig file is accepted where a pipeline config would be.
  if (!j.contains("train") && (j.contains("learning_rate") || j.contains("epochs") || j.contains("batch_size"))) {
    c.train = train_config_from_json(j, c.train);
  }
  if (!j.contains("synth") && (j.contains("fruits_per_class") || j.contains("views_per_fruit"))) {
    c.synth = gen_config_from_json(j, c.synth);
  }
  return c;
}

Manifest checked_manifest(const fs::path& path) {
  Manifest m = load_manifest(path);
  const auto issues = validate_manifest(m);
  if (!issues.empty()) throw Error(ErrorCode::IoError, path.string() + ": " + issues.front().message);
  return m;
}

void print_confusion(const ConfusionMatrix& cm, const std::vector<std::string>& names) {
  std::cout << "confusion (rows = true, columns = predicted):\n";
  for (std::size_t i = 0; i < cm.size(); ++i) {
    std::cout << "  " << (i < names.size() ? names[i] : std::to_string(i));
    for (long v : cm[i]) std::cout << " " << v;
    std::cout << "\n";
  }
}

CLI::Option* add_jobs(CLI::App* sub, Common& o) {
  return sub->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Apple defect classification pipeline"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  Common o;
  std::optional<std::string> manifest, out_dir, weight_cache;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, batch_size;
  std::optional<double> lr;
  std::vector<int> input_size;

  // synth
  auto* synth = app.add_subcommand("synth", "Render a synthetic narrowband/visible/mask dataset");
  std::optional<int> fruits, views, width, height;
  std::optional<double> noise, sev_min, sev_max;
  synth->add_option("--config", o.config, "Pipeline or GenConfig JSON")->check(CLI::ExistingFile);
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->add_option("--seed", seed, "Master seed");
  synth->add_option("--fruits-per-class", fruits, "Fruits per defect class")->check(CLI::PositiveNumber);
  synth->add_option("--views", views, "Views per fruit")->check(CLI::PositiveNumber);
  synth->add_option("--width", width, "Image width")->check(CLI::PositiveNumber);
  synth->add_option("--height", height, "Image height")->check(CLI::PositiveNumber);
  synth->add_option("--noise", noise, "Gaussian noise sigma")->check(CLI::NonNegativeNumber);
  synth->add_option("--severity-min", sev_min, "Lower severity bound");
  synth->add_option("--severity-max", sev_max, "Upper severity bound");
  add_jobs(synth, o);

  // register
  auto* reg = app.add_subcommand("register", "Register narrowband images onto their visible partners");
  std::optional<std::string> matcher;
  std::optional<double> threshold;
  std::vector<int> crop;
  reg->add_option("--config", o.config, "Pipeline config JSON")->check(CLI::ExistingFile);
  reg->add_option("--manifest", manifest, "Input manifest")->required()->check(CLI::ExistingFile);
  reg->add_option("--out", out_dir, "Output directory")->required();
  reg->add_option("--matcher", matcher, "Correspondence source")->check(CLI::IsMember({"builtin", "sidecar"}));
  reg->add_option("--threshold", threshold, "RANSAC inlier threshold in pixels")->check(CLI::PositiveNumber);
  reg->add_option("--seed", seed, "RANSAC seed");
  reg->add_option("--crop", crop, "Output crop width and height")->expected(2);
  add_jobs(reg, o);

  // maskproc
  auto* mp = app.add_subcommand("maskproc", "Drop small connected regions from defect masks");
  std::optional<std::size_t> min_area;
  std::optional<int> connectivity;
  mp->add_option("--config", o.config, "Pipeline config JSON")->check(CLI::ExistingFile);
  mp->add_option("--manifest", manifest, "Input manifest")->required()->check(CLI::ExistingFile);
  mp->add_option("--min-area", min_area, "Smallest region kept, in pixels")->check(CLI::PositiveNumber);
  mp->add_option("--connectivity", connectivity, "Pixel adjacency")->check(CLI::IsMember({4, 8}));
  mp->add_option("--out", out_dir, "Output directory")->required();
  add_jobs(mp, o);

  // split
  auto* sp = app.add_subcommand("split", "Fruit-grouped train/validation split");
  std::optional<double> val_fraction;
  sp->add_option("--config", o.config, "Pipeline config JSON")->check(CLI::ExistingFile);
  sp->add_option("--manifest", manifest, "Input manifest")->required()->check(CLI::ExistingFile);
  sp->add_option("--out", out_dir, "Directory for train.json and val.json")->required();
  sp->add_option("--val-fraction", val_fraction, "Share of fruits held out")->check(CLI::Range(0.0, 1.0));
  sp->add_option("--seed", seed, "Split seed");

  // train
  auto* tr = app.add_subcommand("train", "Train one classifier on one experiment arm");
  std::string arm_name, model_name = "tiny";
  std::optional<std::string> val_manifest;
  bool resume = false;
  tr->add_option("--manifest", manifest, "Training manifest (split internally unless --val is given)")
      ->required()
      ->check(CLI::ExistingFile);
  tr->add_option("--val", val_manifest, "Validation manifest")->check(CLI::ExistingFile);
  tr->add_option("--arm", arm_name, "Experiment arm")
      ->required()
      ->check(CLI::IsMember({"single_nb", "single_vis", "multi_nb_mask", "multi_vis_mask", "multi_nb_vis"}));
  tr->add_option("--config", o.config, "TrainConfig or pipeline config JSON")->check(CLI::ExistingFile);
  tr->add_option("--out", out_dir, "Output directory")->required();
  tr->add_option("--model", model_name, "Backbone")
      ->check(CLI::IsMember({"tiny", "mobilenet_v1", "densenet121", "resnet50", "vgg19"}))
      ->capture_default_str();
  tr->add_option("--epochs", epochs, "Epochs")->check(CLI::NonNegativeNumber);
  tr->add_option("--batch-size", batch_size, "Batch size")->check(CLI::PositiveNumber);
  tr->add_option("--lr", lr, "Adam learning rate")->check(CLI::PositiveNumber);
  tr->add_option("--seed", seed, "Training seed");
  tr->add_option("--input-size", input_size, "Model input width and height")->expected(2);
  tr->add_option("--weight-cache", weight_cache, "Pretrained weight directory");
  tr->add_flag("--resume", resume, "Continue from <out>/last.ckpt");
  add_jobs(tr, o);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  std::string checkpoint;
  std::optional<std::string> eval_arm;
  ev->add_option("--manifest", manifest, "Evaluation manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required()->check(CLI::ExistingFile);
  ev->add_option("--arm", eval_arm, "Experiment arm (defaults to the checkpoint's)")
      ->check(CLI::IsMember({"single_nb", "single_vis", "multi_nb_mask", "multi_vis_mask", "multi_nb_vis"}));
  ev->add_option("--out", out_dir, "Directory for eval.json");
  ev->add_option("--weight-cache", weight_cache, "Pretrained weight directory");
  add_jobs(ev, o);

  // report
  auto* rp = app.add_subcommand("report", "Format experiment results as a table");
  std::string results_dir, layout = "table1", format = "text";
  std::optional<std::string> report_out;
  rp->add_option("--results", results_dir, "Results directory")->required()->check(CLI::ExistingDirectory);
  rp->add_option("--layout", layout, "Table layout")
      ->check(CLI::IsMember({"table1", "table2", "table3"}))
      ->capture_default_str();
  rp->add_option("--format", format, "Output format")->check(CLI::IsMember({"text", "csv"}))->capture_default_str();
  rp->add_option("--out", report_out, "Write the table here instead of stdout");

  // pipeline
  auto* pl = app.add_subcommand("pipeline", "synth, register, maskproc, split, train and report in one go");
  std::vector<std::string> models, arms;
  pl->add_option("--config", o.config, "Pipeline config JSON")->check(CLI::ExistingFile);
  pl->add_option("--out", out_dir, "Output root");
  pl->add_option("--manifest", manifest, "Use this dataset instead of synthesizing")->check(CLI::ExistingFile);
  pl->add_option("--seed", seed, "Master seed");
  pl->add_option("--models", models, "Backbones")
      ->check(CLI::IsMember({"tiny", "mobilenet_v1", "densenet121", "resnet50", "vgg19"}));
  pl->add_option("--arms", arms, "Experiment arms")
      ->check(CLI::IsMember({"single_nb", "single_vis", "multi_nb_mask", "multi_vis_mask", "multi_nb_vis"}));
  pl->add_option("--epochs", epochs, "Epochs per cell")->check(CLI::NonNegativeNumber);
  pl->add_option("--weight-cache", weight_cache, "Pretrained weight directory");
  add_jobs(pl, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) {
      PipelineConfig c = load_config(o);
      GenConfig g = c.synth;
      if (seed) g.master_seed = *seed;
      if (fruits) {
        for (auto cls : kDefectClasses) g.fruits_per_class[cls] = *fruits;
      }
      if (views) g.views_per_fruit = *views;
      if (width) g.width = *width;
      if (height) g.height = *height;
      if (noise) g.noise_sigma = *noise;
      if (sev_min) g.severity_min = *sev_min;
      if (sev_max) g.severity_max = *sev_max;
      g.output_dir = *out_dir;
      const Manifest m = generate_dataset(g, o.jobs);
      write_run_meta(*out_dir, "synth", to_json(g), g.master_seed);
      std::cout << m.records.size() << " records written to " << (g.output_dir / "manifest.json").string() << "\n";
    } else if (reg->parsed()) {
      PipelineConfig c = load_config(o);
      RegistrationStage stage = c.registration;
      stage.enabled = true;
      if (matcher) stage.matcher = *matcher == "builtin" ? MatcherKind::builtin : MatcherKind::sidecar;
      if (threshold) stage.config.ransac_threshold = *threshold;
      if (seed) stage.config.seed = *seed;
      if (crop.size() == 2) {
        stage.config.out_width = crop[0];
        stage.config.out_height = crop[1];
      }
      c.registration = stage;
      const Manifest m = checked_manifest(*manifest);
      const auto outcome = register_manifest(m, *out_dir, stage, o.jobs);
      write_run_meta(*out_dir, "register", to_json(c)["registration"], c.master_seed);
      std::cout << m.records.size() - outcome.failures << " registered, " << outcome.failures << " failed\n";
    } else if (mp->parsed()) {
      PipelineConfig c = load_config(o);
      MaskStage stage = c.maskproc;
      stage.enabled = true;
      if (min_area) stage.min_area = *min_area;
      if (connectivity) stage.connectivity = *connectivity;
      const Manifest m = checked_manifest(*manifest);
      filter_manifest_masks(m, *out_dir, stage, o.jobs);
      write_run_meta(*out_dir, "maskproc",
                     {{"manifest", *manifest}, {"min_area", stage.min_area}, {"connectivity", stage.connectivity}},
                     c.master_seed);
      std::cout << "filtered masks written to " << (fs::path(*out_dir) / "manifest.json").string() << "\n";
    } else if (sp->parsed()) {
      PipelineConfig c = load_config(o);
      if (val_fraction) c.split.val_fraction = *val_fraction;
      if (seed) c.split.seed = *seed;
      const Manifest m = checked_manifest(*manifest);
      const auto [train_m, val_m] = split_grouped(m, c.split);
      save_manifest(train_m, fs::path(*out_dir) / "train.json");
      save_manifest(val_m, fs::path(*out_dir) / "val.json");
      write_run_meta(*out_dir, "split",
                     {{"manifest", *manifest}, {"val_fraction", c.split.val_fraction}, {"seed", c.split.seed}},
                     c.split.seed);
      for (const auto& [name, part] : {std::pair{"train", &train_m}, std::pair{"val", &val_m}}) {
        std::cout << name << ":";
        for (const auto& [cls, n] : class_distribution(*part)) std::cout << " " << to_string(cls) << " " << n;
        std::cout << "\n";
      }
    } else if (tr->parsed()) {
      PipelineConfig c = load_config(o);
      if (epochs) c.train.epochs = *epochs;
      if (batch_size) c.train.batch_size = *batch_size;
      if (lr) c.train.learning_rate = *lr;
      if (seed) c.train.seed = *seed;
      if (input_size.size() == 2) {
        c.input_width = input_size[0];
        c.input_height = input_size[1];
      }
      if (weight_cache) c.weight_cache = *weight_cache;
      c.models = {*parse_backbone_name(model_name)};
      const ExperimentArm arm = *parse_arm(arm_name);
      c.arms = {arm};

      Manifest train_m = checked_manifest(*manifest), val_m;
      if (val_manifest) {
        val_m = checked_manifest(*val_manifest);
      } else {
        std::tie(train_m, val_m) = split_grouped(train_m, c.split);
      }
      check_modalities(train_m, arm);
      const Dataset train_set = load_examples(train_m, arm, c.input_width, c.input_height, o.jobs);
      const Dataset val_set = load_examples(val_m, arm, c.input_width, c.input_height, o.jobs);

      const ClassifierSpec spec = classifier_spec_for(c.models[0], arm, matrix_config(c));
      Classifier model = build_classifier(spec, derive_seed(c.train.seed, {"init"}), c.weight_cache);
      const fs::path dir = *out_dir;
      TrainOptions opts;
      opts.out_dir = dir;
      opts.tag = {{"model", model_name}, {"arm", arm_name}};
      if (resume && fs::exists(dir / "last.ckpt")) opts.resume_from = dir / "last.ckpt";
      opts.on_epoch = [&](int epoch, const EpochStats& s) {
        std::cerr << "epoch " << epoch + 1 << "/" << c.train.epochs << " train_loss " << s.train_loss << " val_loss "
                  << s.val_loss << " val_acc " << s.val_accuracy << "\n";
      };
      write_run_meta(dir, "train", to_json(c), c.train.seed);
      const TrainResult result = train(model, train_set, val_set, c.train, opts);

      ExperimentResult r;
      r.model_name = display_name(c.models[0]);
      r.arm = arm;
      r.history_path = "history.json";
      const Classifier best = result.best_checkpoint ? load_weights(spec, *result.best_checkpoint, c.weight_cache) : model;
      const Evaluation e = evaluate(best, val_set);
      r.accuracy_pct = result.history.empty() ? e.accuracy : result.best_val_accuracy;
      r.final_accuracy_pct = result.history.empty() ? e.accuracy : result.history.back().val_accuracy;
      r.best_epoch = result.best_epoch + 1;
      r.confusion = confusion_matrix(e.predictions, e.labels, spec.head.num_classes);
      save_result(dir / "result.json", r);
      std::cout << "best val accuracy " << format_percent(r.accuracy_pct) << " (epoch " << r.best_epoch << ")\n";
      print_confusion(r.confusion, val_m.class_names);
    } else if (ev->parsed()) {
      const Archive a = load_archive(checkpoint);
      if (!a.meta.contains("spec")) throw Error(ErrorCode::CorruptCheckpoint, checkpoint + ": no classifier spec");
      const ClassifierSpec spec = classifier_spec_from_json(a.meta["spec"]);
      std::string arm_key;
      if (eval_arm) {
        arm_key = *eval_arm;
      } else if (a.meta.contains("tag") && a.meta["tag"].is_object() && a.meta["tag"].contains("arm")) {
        arm_key = a.meta["tag"]["arm"].get<std::string>();
      } else {
        throw Error(ErrorCode::ConfigError, "checkpoint names no arm; pass --arm");
      }
      const auto arm = parse_arm(arm_key);
      if (!arm) throw Error(ErrorCode::ConfigError, "unknown arm " + arm_key);
      std::optional<fs::path> cache;
      if (weight_cache) cache = *weight_cache;
      const Classifier model = load_weights(spec, checkpoint, cache);
      const Manifest m = checked_manifest(*manifest);
      check_modalities(m, *arm);
      const Dataset data =
          load_examples(m, *arm, spec.backbone_a.input_width, spec.backbone_a.input_height, o.jobs);
      const Evaluation e = evaluate(model, data);
      const ConfusionMatrix cm = confusion_matrix(e.predictions, e.labels, spec.head.num_classes);
      std::cout << "accuracy " << format_percent(e.accuracy) << " loss " << e.loss << " on " << data.size()
                << " examples\n";
      print_confusion(cm, m.class_names);
      if (out_dir) {
        const json report = {{"checkpoint", checkpoint}, {"manifest", *manifest}, {"arm", arm_key},
                             {"accuracy_pct", e.accuracy}, {"loss", e.loss}, {"confusion", cm}};
        write_text(fs::path(*out_dir) / "eval.json", report.dump(2) + "\n");
        write_run_meta(*out_dir, "eval", {{"checkpoint", checkpoint}, {"manifest", *manifest}, {"arm", arm_key}}, 0);
      }
    } else if (rp->parsed()) {
      const auto results = load_results(results_dir);
      const std::string table = emit_table(results, parse_layout(layout), *parse_format(format));
      if (report_out) {
        write_text(*report_out, table);
        const fs::path dir = fs::path(*report_out).parent_path();
        write_run_meta(dir.empty() ? "." : dir, "report",
                       {{"results", results_dir}, {"layout", layout}, {"format", format}}, 0);
      } else {
        std::cout << table;
      }
    } else if (pl->parsed()) {
      PipelineConfig c = load_config(o);
      if (seed) c = pipeline_config_from_json({{"master_seed", *seed}}, c);
      if (out_dir) c.output_root = *out_dir;
      if (manifest) c.manifest = *manifest;
      if (weight_cache) c.weight_cache = *weight_cache;
      if (epochs) c.train.epochs = *epochs;
      if (!models.empty()) {
        c.models.clear();
        for (const auto& s : models) c.models.push_back(*parse_backbone_name(s));
      }
      if (!arms.empty()) {
        c.arms.clear();
        for (const auto& s : arms) c.arms.push_back(*parse_arm(s));
      }
      c.jobs = o.jobs;
      const auto outcome = run_pipeline(c, log_line);
      std::cout << emit_table(outcome.results, TableLayout::table1, TableFormat::text);
      std::cout << "tables written to " << (c.output_root / "tables").string() << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
