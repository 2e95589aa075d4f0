// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <filesystem>

#include <gtest/gtest.h>

#include "appledefect/error.hpp"
#include "appledefect/evalreport.hpp"
#include "appledefect/synthgen.hpp"
#include "support.hpp"

using namespace appledefect;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no exception";
  return ErrorCode::IoError;
}

Manifest small_synth(const fs::path& dir) {
  GenConfig g;
  for (auto c : kDefectClasses) g.fruits_per_class[c] = 3;
  g.views_per_fruit = 2;
  g.width = 48;
  g.height = 42;
  g.output_dir = dir;
  return generate_dataset(g);
}

MatrixConfig small_matrix(const fs::path& results) {
  MatrixConfig mc;
  mc.arms = {ExperimentArm::single_nb, ExperimentArm::single_vis};
  mc.train.epochs = 2;
  mc.train.batch_size = 4;
  mc.input_width = mc.input_height = 32;
  mc.split.val_fraction = 0.34;
  mc.results_dir = results;
  return mc;
}

std::vector<ExperimentResult> published_results() { return load_results(testsupport::test_dir() / "fixtures" / "published_tables"); }

}  // namespace

TEST(Accuracy, Examples) {
  const std::vector<int> l{0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
  EXPECT_DOUBLE_EQ(accuracy(l, l), 100.0);
  std::vector<int> p = l;
  p[0] = 1;
  p[4] = 2;
  p[8] = 0;
  EXPECT_DOUBLE_EQ(accuracy(p, l), 70.0);
  EXPECT_EQ(code_of([] { accuracy(std::vector<int>{}, std::vector<int>{}); }), ErrorCode::EmptyEvaluation);
  EXPECT_EQ(code_of([&] { accuracy(std::vector<int>{1}, l); }), ErrorCode::LengthMismatch);
}

TEST(Confusion, Examples) {
  std::vector<int> labels;
  for (int i = 0; i < 30; ++i) labels.push_back(i % 3);
  EXPECT_EQ(confusion_matrix(labels, labels), (ConfusionMatrix{{10, 0, 0}, {0, 10, 0}, {0, 0, 10}}));
  const std::vector<int> zeros(30, 0);
  EXPECT_EQ(confusion_matrix(zeros, labels), (ConfusionMatrix{{10, 0, 0}, {10, 0, 0}, {10, 0, 0}}));
  EXPECT_EQ(code_of([&] { confusion_matrix(std::vector<int>{3}, std::vector<int>{0}); }), ErrorCode::LabelOutOfRange);
  EXPECT_EQ(code_of([&] { confusion_matrix(std::vector<int>{0}, std::vector<int>{-1}); }), ErrorCode::LabelOutOfRange);
}

TEST(Confusion, MatchesTallyAndAccuracyOnRandomInputs) {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(60);
    std::vector<int> p(n), l(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<int>(rng.below(3));
      l[i] = static_cast<int>(rng.below(3));
    }
    ConfusionMatrix tally(3, std::vector<long>(3, 0));
    long matches = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) tally[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] += l[i] == a && p[i] == b;
      }
      matches += p[i] == l[i];
    }
    const auto cm = confusion_matrix(p, l);
    ASSERT_EQ(cm, tally);
    const long trace = cm[0][0] + cm[1][1] + cm[2][2];
    ASSERT_DOUBLE_EQ(accuracy(p, l), 100.0 * static_cast<double>(trace) / static_cast<double>(n));
    ASSERT_DOUBLE_EQ(accuracy(p, l), 100.0 * static_cast<double>(matches) / static_cast<double>(n));
  }
}

TEST(Arms, Recipes) {
  EXPECT_EQ(arm_inputs(ExperimentArm::single_nb), (std::vector<Modality>{Modality::narrowband}));
  EXPECT_EQ(arm_inputs(ExperimentArm::single_vis), (std::vector<Modality>{Modality::visible}));
  EXPECT_EQ(arm_inputs(ExperimentArm::multi_nb_mask), (std::vector<Modality>{Modality::narrowband, Modality::mask}));
  EXPECT_EQ(arm_inputs(ExperimentArm::multi_vis_mask), (std::vector<Modality>{Modality::visible, Modality::mask}));
  EXPECT_EQ(arm_inputs(ExperimentArm::multi_nb_vis), (std::vector<Modality>{Modality::narrowband, Modality::visible}));
  for (auto a : kAllArms) {
    EXPECT_EQ(parse_arm(to_string(a)), a);
    EXPECT_EQ(is_multi(a), arm_inputs(a).size() == 2);
  }
  EXPECT_FALSE(parse_arm("single_ir").has_value());
}

TEST(Format, HalfUpTwoDecimals) {
  EXPECT_EQ(format_percent(98.8), "98.80");
  EXPECT_EQ(format_percent(0.0), "0.00");
  EXPECT_EQ(format_percent(100.0), "100.00");
  EXPECT_EQ(format_percent(33.335), "33.34");
  EXPECT_EQ(format_percent(2.0 / 3.0 * 100.0), "66.67");
  EXPECT_EQ(format_percent(12.344999), "12.34");
}

TEST(Tables, PublishedFixturesMatchGoldenFiles) {
  const auto results = published_results();
  ASSERT_EQ(results.size(), 20u);
  const std::pair<const char*, TableLayout> layouts[] = {
      {"table1", TableLayout::table1}, {"table2", TableLayout::table2}, {"table3", TableLayout::table3}};
  for (const auto& [name, layout] : layouts) {
    for (const auto& [ext, format] : {std::pair{".txt", TableFormat::text}, std::pair{".csv", TableFormat::csv}}) {
      const auto golden = testsupport::read_text(testsupport::test_dir() / "golden" / (std::string(name) + ext));
      EXPECT_EQ(emit_table(results, layout, format), golden) << name << ext;
    }
  }
}

TEST(Tables, RowsAndMissingCells) {
  auto results = published_results();
  std::reverse(results.begin(), results.end());
  const auto text = emit_table(results, TableLayout::table1, TableFormat::text);
  EXPECT_NE(text.find("MobileNetV1 | 98.80 | 98.26\n"), std::string::npos);
  EXPECT_EQ(text, emit_table(results, TableLayout::table1, TableFormat::text));
  EXPECT_LT(text.find("MobileNetV1"), text.find("VGG19"));

  std::vector<ExperimentResult> partial;
  partial.push_back({.model_name = "tiny", .arm = ExperimentArm::single_vis, .accuracy_pct = 91.6666});
  partial.push_back({.model_name = "Alpha", .arm = ExperimentArm::single_nb, .accuracy_pct = 50});
  partial.push_back({.model_name = "vgg19", .arm = ExperimentArm::single_nb, .accuracy_pct = 40});
  EXPECT_EQ(emit_table(partial, TableLayout::table1, TableFormat::text),
            "Model | 660 nm spectrum (%) | Visible spectrum (%)\n"
            "VGG19 | 40.00 | —\n"
            "Alpha | 50.00 | —\n"
            "Tiny | — | 91.67\n");
  EXPECT_EQ(emit_table({}, TableLayout::table3, TableFormat::csv), "Model,660 nm + visible spectrum (%)\n");
}

TEST(Tables, CsvQuoting) {
  std::vector<ExperimentResult> r{{.model_name = "a,b \"x\"", .arm = ExperimentArm::multi_nb_vis, .accuracy_pct = 1}};
  EXPECT_EQ(emit_table(r, TableLayout::table3, TableFormat::csv),
            "Model,660 nm + visible spectrum (%)\n\"a,b \"\"x\"\"\",1.00\n");
}

TEST(Tables, UnknownLayout) {
  EXPECT_EQ(parse_layout("table2"), TableLayout::table2);
  EXPECT_EQ(code_of([] { parse_layout("table4"); }), ErrorCode::UnknownLayout);
  EXPECT_EQ(parse_format("csv"), TableFormat::csv);
  EXPECT_FALSE(parse_format("xlsx").has_value());
}

TEST(Results, JsonRoundTrip) {
  testsupport::TempDir dir;
  ExperimentResult r{.model_name = "tiny",
                     .arm = ExperimentArm::multi_nb_mask,
                     .accuracy_pct = 66.6,
                     .final_accuracy_pct = 60,
                     .best_epoch = 4,
                     .confusion = {{1, 2, 3}, {4, 5, 6}, {7, 8, 9}},
                     .history_path = "h.json",
                     .cache_key = "abc"};
  save_result(dir / "tiny" / "multi_nb_mask" / "result.json", r);
  const auto back = load_result(dir / "tiny" / "multi_nb_mask" / "result.json");
  EXPECT_EQ(to_json(back), to_json(r));
  EXPECT_EQ(load_results(dir.path()).size(), 1u);
}

TEST(Matrix, MissingMasks) {
  testsupport::TempDir dir;
  Manifest m = small_synth(dir / "synth");
  for (auto& r : m.records) r.mask_path.reset();
  EXPECT_EQ(code_of([&] { check_modalities(m, ExperimentArm::multi_vis_mask); }), ErrorCode::MissingModality);
  EXPECT_NO_THROW(check_modalities(m, ExperimentArm::multi_nb_vis));
  auto mc = small_matrix(dir / "results");
  mc.arms = {ExperimentArm::multi_vis_mask};
  EXPECT_EQ(code_of([&] { run_experiment_matrix(m, mc); }), ErrorCode::MissingModality);
}

TEST(Matrix, LoadExampleShapes) {
  testsupport::TempDir dir;
  const Manifest m = small_synth(dir / "synth");
  const auto in = load_example(m, m.records[0], ExperimentArm::multi_nb_mask, 32, 24);
  ASSERT_EQ(in.size(), 2u);
  for (const auto& img : in) {
    EXPECT_EQ(img.width, 32);
    EXPECT_EQ(img.height, 24);
    EXPECT_EQ(img.channels, 3);
  }
  for (std::size_t p = 0; p < in[0].data.size(); p += 3) ASSERT_EQ(in[0].data[p], in[0].data[p + 2]);
  for (double v : in[1].data) ASSERT_TRUE(v == 0.0 || v == 1.0);
  const auto parallel = load_examples(m, ExperimentArm::single_vis, 32, 32, 3);
  const auto serial = load_examples(m, ExperimentArm::single_vis, 32, 32, 1);
  ASSERT_EQ(parallel.size(), m.records.size());
  for (std::size_t i = 0; i < serial.size(); ++i) {
    EXPECT_EQ(parallel[i].inputs, serial[i].inputs);
    EXPECT_EQ(parallel[i].label, static_cast<int>(m.records[i].defect_class));
  }
}

TEST(Matrix, RunsCellsAndCaches) {
  testsupport::TempDir dir;
  const Manifest m = small_synth(dir / "synth");
  const auto mc = small_matrix(dir / "results");
  const auto first = run_experiment_matrix(m, mc);
  ASSERT_EQ(first.size(), 2u);
  const auto [train_set, val_set] = split_grouped(m, mc.split);
  for (const auto& r : first) {
    ASSERT_EQ(r.confusion.size(), 3u);
    long total = 0, trace = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) total += r.confusion[i][j];
      trace += r.confusion[i][i];
    }
    EXPECT_EQ(static_cast<std::size_t>(total), val_set.records.size());
    EXPECT_NEAR(r.accuracy_pct, 100.0 * static_cast<double>(trace) / static_cast<double>(total), 1e-9);
    EXPECT_TRUE(fs::exists(dir / "results" / "tiny" / std::string(to_string(r.arm)) / "history.json"));
    EXPECT_TRUE(fs::exists(dir / "results" / "tiny" / std::string(to_string(r.arm)) / "best.ckpt"));
  }

  const auto vis = dir / "results" / "tiny" / "single_vis" / "result.json";
  const auto nb = dir / "results" / "tiny" / "single_nb" / "result.json";
  const auto nb_bytes = testsupport::read_text(nb);
  const auto nb_time = fs::last_write_time(nb);
  const auto vis_bytes = testsupport::read_text(vis);
  fs::remove(vis);
  fs::remove(dir / "results" / "tiny" / "single_vis" / "last.ckpt");
  const auto second = run_experiment_matrix(m, mc);
  EXPECT_EQ(fs::last_write_time(nb), nb_time);
  EXPECT_EQ(testsupport::read_text(nb), nb_bytes);
  EXPECT_EQ(testsupport::read_text(vis), vis_bytes);
  ASSERT_EQ(second.size(), 2u);
  EXPECT_EQ(to_json(second[0]), to_json(first[0]));
  EXPECT_EQ(to_json(second[1]), to_json(first[1]));

  auto changed = mc;
  changed.train.epochs = 1;
  const auto third = run_experiment_matrix(m, changed);
  EXPECT_NE(third[0].cache_key, first[0].cache_key);
  EXPECT_NE(fs::last_write_time(nb), nb_time);
}

TEST(Matrix, IndependentOfArmOrder) {
  testsupport::TempDir dir;
  const Manifest m = small_synth(dir / "synth");
  auto mc = small_matrix(dir / "a");
  mc.train.epochs = 1;
  const auto a = run_experiment_matrix(m, mc);
  mc.results_dir = dir / "b";
  mc.arms = {ExperimentArm::single_vis, ExperimentArm::single_nb};
  mc.jobs = 2;
  const auto b = run_experiment_matrix(m, mc);
  EXPECT_EQ(testsupport::read_text(dir / "a" / "tiny" / "single_nb" / "history.json"),
            testsupport::read_text(dir / "b" / "tiny" / "single_nb" / "history.json"));
  EXPECT_EQ(testsupport::read_text(dir / "a" / "tiny" / "single_vis" / "history.json"),
            testsupport::read_text(dir / "b" / "tiny" / "single_vis" / "history.json"));
}

TEST(Matrix, SpecsForCells) {
  MatrixConfig mc;
  const auto s = classifier_spec_for(BackboneName::tiny, ExperimentArm::multi_nb_vis, mc);
  EXPECT_EQ(s.mode, InputMode::multi);
  ASSERT_TRUE(s.backbone_b.has_value());
  EXPECT_FALSE(s.backbone_a.pretrained);
  const auto named = classifier_spec_for(BackboneName::resnet50, ExperimentArm::single_nb, mc);
  EXPECT_TRUE(named.backbone_a.pretrained);
  EXPECT_EQ(named.backbone_a.feature_depth, 2048);
  EXPECT_EQ(named.mode, InputMode::single);
}
