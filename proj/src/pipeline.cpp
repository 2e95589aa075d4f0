// SPDX-License-Identifier: Apache-2.0
#include "appledefect/pipeline.hpp"

#include <fstream>
#include <sstream>

#include "appledefect/error.hpp"
#include "appledefect/hash.hpp"
#include "appledefect/maskproc.hpp"
#include "appledefect/parallel.hpp"

namespace appledefect {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return {};
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::OutputNotWritable, p.string());
  out << text;
  if (!out) throw Error(ErrorCode::OutputNotWritable, p.string());
}

/// A stage output is reusable when its stamp file holds exactly `stamp`.
bool stamp_matches(const fs::path& dir, const std::string& stamp) {
  return fs::is_regular_file(dir / "stage_stamp.json") && fs::is_regular_file(dir / "manifest.json") &&
         read_file(dir / "stage_stamp.json") == stamp;
}

const char* matcher_name(MatcherKind k) { return k == MatcherKind::builtin ? "builtin" : "sidecar"; }

json matcher_json(const RegistrationStage& s) {
  const auto& c = s.config;
  return {{"enabled", s.enabled},
          {"matcher", matcher_name(s.matcher)},
          {"grid", c.grid},
          {"patch", c.patch},
          {"search", c.search},
          {"min_ncc", c.min_ncc},
          {"threshold", c.ransac_threshold},
          {"iterations", c.ransac_iterations},
          {"seed", c.seed},
          {"family", c.family == TransformFamily::homography ? "homography" : "affine"},
          {"refine_passes", c.refine_passes},
          {"crop", {c.out_width, c.out_height}}};
}

json head_json(const HeadSpec& h) {
  return {{"hidden_sizes", h.hidden_sizes}, {"dropout_rate", h.dropout_rate}, {"num_classes", h.num_classes}};
}

}  // namespace

PipelineConfig pipeline_config_from_json(const json& j, PipelineConfig c) {
  try {
    if (j.contains("master_seed")) {
      c.master_seed = j["master_seed"].get<std::uint64_t>();
      c.synth.master_seed = c.master_seed;
      c.split.seed = c.master_seed;
      c.registration.config.seed = derive_seed(c.master_seed, {"register"});
    }
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      if (p.contains("manifest") && !p["manifest"].is_null()) c.manifest = p["manifest"].get<std::string>();
      if (p.contains("output_root")) c.output_root = p["output_root"].get<std::string>();
      if (p.contains("weight_cache") && !p["weight_cache"].is_null()) {
        c.weight_cache = p["weight_cache"].get<std::string>();
      }
    }
    if (j.contains("synth")) c.synth = gen_config_from_json(j["synth"], c.synth);
    if (j.contains("registration")) {
      const auto& r = j["registration"];
      auto& m = c.registration.config;
      c.registration.enabled = r.value("enabled", c.registration.enabled);
      const auto matcher = r.value("matcher", std::string(matcher_name(c.registration.matcher)));
      if (matcher != "builtin" && matcher != "sidecar") throw Error(ErrorCode::ConfigError, "matcher: " + matcher);
      c.registration.matcher = matcher == "builtin" ? MatcherKind::builtin : MatcherKind::sidecar;
      m.grid = r.value("grid", m.grid);
      m.patch = r.value("patch", m.patch);
      m.search = r.value("search", m.search);
      m.min_ncc = r.value("min_ncc", m.min_ncc);
      m.ransac_threshold = r.value("threshold", m.ransac_threshold);
      m.ransac_iterations = r.value("iterations", m.ransac_iterations);
      m.seed = r.value("seed", m.seed);
      m.refine_passes = r.value("refine_passes", m.refine_passes);
      const auto family = r.value("family", std::string(m.family == TransformFamily::homography ? "homography" : "affine"));
      if (family != "homography" && family != "affine") throw Error(ErrorCode::ConfigError, "family: " + family);
      m.family = family == "homography" ? TransformFamily::homography : TransformFamily::affine;
      if (r.contains("crop")) {
        m.out_width = r["crop"].at(0).get<int>();
        m.out_height = r["crop"].at(1).get<int>();
      }
      if (!(m.ransac_threshold > 0.0) || m.ransac_iterations < 1 || m.refine_passes < 0 || m.out_width < 1 ||
          m.out_height < 1) {
        throw Error(ErrorCode::ConfigError, "registration needs threshold > 0, iterations >= 1 and a positive crop");
      }
    }
    if (j.contains("maskproc")) {
      const auto& m = j["maskproc"];
      c.maskproc.enabled = m.value("enabled", c.maskproc.enabled);
      c.maskproc.min_area = m.value("min_area", c.maskproc.min_area);
      c.maskproc.connectivity = m.value("connectivity", c.maskproc.connectivity);
      if (c.maskproc.min_area < 1 || (c.maskproc.connectivity != 4 && c.maskproc.connectivity != 8)) {
        throw Error(ErrorCode::ConfigError, "maskproc needs min_area >= 1 and connectivity 4 or 8");
      }
    }
    if (j.contains("split")) {
      c.split.val_fraction = j["split"].value("val_fraction", c.split.val_fraction);
      c.split.seed = j["split"].value("seed", c.split.seed);
    }
    if (j.contains("train")) c.train = train_config_from_json(j["train"], c.train);
    if (j.contains("input_size")) {
      c.input_width = j["input_size"].at(0).get<int>();
      c.input_height = j["input_size"].at(1).get<int>();
      if (c.input_width < 1 || c.input_height < 1) throw Error(ErrorCode::ConfigError, "input_size must be positive");
    }
    if (j.contains("head")) {
      const auto& h = j["head"];
      c.head.hidden_sizes = h.value("hidden_sizes", c.head.hidden_sizes);
      c.head.dropout_rate = h.value("dropout_rate", c.head.dropout_rate);
      c.head.num_classes = h.value("num_classes", c.head.num_classes);
    }
    c.share_weights = j.value("share_weights", c.share_weights);
    if (j.contains("models")) {
      c.models.clear();
      for (const auto& m : j["models"]) {
        const auto name = parse_backbone_name(m.get<std::string>());
        if (!name) throw Error(ErrorCode::ConfigError, "unknown model " + m.get<std::string>());
        c.models.push_back(*name);
      }
    }
    if (j.contains("arms")) {
      c.arms.clear();
      for (const auto& a : j["arms"]) {
        const auto arm = parse_arm(a.get<std::string>());
        if (!arm) throw Error(ErrorCode::ConfigError, "unknown arm " + a.get<std::string>());
        c.arms.push_back(*arm);
      }
    }
    c.jobs = j.value("jobs", c.jobs);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("pipeline config: ") + e.what());
  }
  return c;
}

json to_json(const PipelineConfig& c) {
  json models = json::array(), arms = json::array();
  for (auto m : c.models) models.push_back(std::string(to_string(m)));
  for (auto a : c.arms) arms.push_back(std::string(to_string(a)));
  return {{"paths",
           {{"manifest", c.manifest ? json(c.manifest->string()) : json(nullptr)},
            {"output_root", c.output_root.string()},
            {"weight_cache", c.weight_cache ? json(c.weight_cache->string()) : json(nullptr)}}},
          {"master_seed", c.master_seed},
          {"synth", to_json(c.synth)},
          {"registration", matcher_json(c.registration)},
          {"maskproc",
           {{"enabled", c.maskproc.enabled}, {"min_area", c.maskproc.min_area}, {"connectivity", c.maskproc.connectivity}}},
          {"split", {{"val_fraction", c.split.val_fraction}, {"seed", c.split.seed}}},
          {"train", to_json(c.train)},
          {"input_size", {c.input_width, c.input_height}},
          {"head", head_json(c.head)},
          {"share_weights", c.share_weights},
          {"models", models},
          {"arms", arms},
          {"jobs", c.jobs}};
}

MatrixConfig matrix_config(const PipelineConfig& c) {
  MatrixConfig m;
  m.models = c.models;
  m.arms = c.arms;
  m.train = c.train;
  m.split = c.split;
  m.input_width = c.input_width;
  m.input_height = c.input_height;
  m.head = c.head;
  m.share_weights = c.share_weights;
  m.master_seed = c.master_seed;
  m.results_dir = c.output_root / "results";
  m.weight_cache = c.weight_cache;
  m.jobs = c.jobs;
  return m;
}

void write_run_meta(const fs::path& dir, const std::string& command, const json& config, std::uint64_t master_seed) {
  json cfg = config;
  cfg.erase("jobs");
  const std::string canonical = cfg.dump();
  const json meta = {{"command", command},
                     {"artifact_version", kArtifactVersion},
                     {"master_seed", master_seed},
                     {"config_hash", Fnv1a().update(canonical).hex()},
                     {"config", config}};
  write_file(dir / "run_meta.json", meta.dump(2) + "\n");
}

fs::path sidecar_path(const Manifest& m, const CaptureRecord& r) {
  fs::path p = m.resolve(r.narrowband_path);
  return p.replace_extension(".matches.json");
}

RegistrationOutcome register_manifest(const Manifest& m, const fs::path& out_dir, const RegistrationStage& stage,
                                      unsigned jobs) {
  RegistrationOutcome out;
  out.manifest = rebase(m, out_dir);
  std::vector<json> rows(m.records.size());
  parallel_for(m.records.size(), jobs, [&](std::size_t i) {
    const auto& r = m.records[i];
    const Image moving = read_png(m.resolve(r.narrowband_path));
    const Image fixed = read_png(m.resolve(r.visible_path));
    json row = {{"fruit_id", r.fruit_id}, {"view_index", r.view_index}};
    RegistrationResult reg;
    try {
      if (stage.matcher == MatcherKind::sidecar) {
        const auto corrs = load_correspondences(sidecar_path(m, r));
        reg = register_pair(moving, fixed, stage.config, std::span<const Correspondence>(corrs));
      } else {
        reg = register_pair(moving, fixed, stage.config);
      }
      row["status"] = "ok";
    } catch (const Error& e) {
      reg.h = Homography::identity();
      reg.registered = warp_and_crop(moving, reg.h, stage.config.out_width, stage.config.out_height);
      row["status"] = "failed";
      row["error"] = e.what();
    }
    row["matches"] = reg.diagnostics.matches;
    row["inliers"] = reg.diagnostics.inliers;
    row["mean_residual"] = reg.diagnostics.mean_residual;
    json h = json::array();
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) h.push_back(reg.h.matrix()(a, b));
    }
    row["h"] = h;
    // Visible image and mask are cropped to the same frame so the triple stays pixel-aligned.
    const auto& cfg = stage.config;
    const fs::path stem = fs::path(r.fruit_id) / std::to_string(r.view_index);
    auto& rec = out.manifest.records[i];
    rec.narrowband_path = stem.string() + "_nb.png";
    rec.visible_path = stem.string() + "_vis.png";
    write_png(out_dir / rec.narrowband_path, reg.registered);
    write_png(out_dir / rec.visible_path, warp_and_crop(fixed, Homography::identity(), cfg.out_width, cfg.out_height));
    if (r.mask_path) {
      rec.mask_path = stem.string() + "_mask.png";
      write_png(out_dir / *rec.mask_path,
                warp_and_crop(read_png(m.resolve(*r.mask_path)), Homography::identity(), cfg.out_width, cfg.out_height));
    }
    rows[i] = std::move(row);
  });
  out.report = {{"records", json::array()}};
  for (auto& row : rows) {
    if (row["status"] != "ok") ++out.failures;
    out.report["records"].push_back(std::move(row));
  }
  out.report["failures"] = out.failures;
  write_file(out_dir / "registration_report.json", out.report.dump(2) + "\n");
  save_manifest(out.manifest, out_dir / "manifest.json");
  return out;
}

Manifest filter_manifest_masks(const Manifest& m, const fs::path& out_dir, const MaskStage& stage, unsigned jobs) {
  Manifest out = rebase(m, out_dir);
  parallel_for(m.records.size(), jobs, [&](std::size_t i) {
    const auto& r = m.records[i];
    if (!r.mask_path) return;
    const BinaryMask mask = mask_from_image(read_png(m.resolve(*r.mask_path)));
    const fs::path rel = fs::path(r.fruit_id) / (std::to_string(r.view_index) + "_mask.png");
    write_png(out_dir / rel, mask_to_image(filter_regions(mask, stage.min_area, stage.connectivity)));
    out.records[i].mask_path = rel;
  });
  save_manifest(out, out_dir / "manifest.json");
  return out;
}

PipelineOutcome run_pipeline(const PipelineConfig& c, const std::function<void(const std::string&)>& log) {
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  PipelineOutcome out;
  std::error_code ec;
  fs::create_directories(c.output_root, ec);
  if (ec || !fs::is_directory(c.output_root)) throw Error(ErrorCode::OutputNotWritable, c.output_root.string());
  write_run_meta(c.output_root, "pipeline", to_json(c), c.master_seed);

  Manifest m;
  if (c.manifest) {
    m = load_manifest(*c.manifest);
    say("ingest: " + std::to_string(m.records.size()) + " records from " + c.manifest->string());
  } else {
    GenConfig g = c.synth;
    g.output_dir = c.output_root / "synth";
    json stamp_json = to_json(g);
    stamp_json.erase("output_dir");
    const std::string stamp = stamp_json.dump();
    if (stamp_matches(g.output_dir, stamp)) {
      m = load_manifest(g.output_dir / "manifest.json");
      out.cached_stages.push_back("synth");
      say("synth: cached");
    } else {
      fs::remove(g.output_dir / "stage_stamp.json", ec);
      m = generate_dataset(g, c.jobs);
      write_file(g.output_dir / "stage_stamp.json", stamp);
      say("synth: " + std::to_string(m.records.size()) + " records");
    }
  }
  const auto issues = validate_manifest(m);
  if (!issues.empty()) throw Error(ErrorCode::IoError, "manifest invalid: " + issues.front().message);

  if (c.registration.enabled) {
    const fs::path dir = c.output_root / "registered";
    const std::string stamp = json({{"input", manifest_content_hash(m)}, {"stage", matcher_json(c.registration)}}).dump();
    if (stamp_matches(dir, stamp)) {
      m = load_manifest(dir / "manifest.json");
      out.cached_stages.push_back("register");
      say("register: cached");
    } else {
      fs::remove(dir / "stage_stamp.json", ec);
      auto reg = register_manifest(m, dir, c.registration, c.jobs);
      m = std::move(reg.manifest);
      write_file(dir / "stage_stamp.json", stamp);
      say("register: " + std::to_string(reg.failures) + " failures");
    }
  }

  if (c.maskproc.enabled && m.has_masks()) {
    const fs::path dir = c.output_root / "masks";
    const std::string stamp = json({{"input", manifest_content_hash(m)},
                                    {"min_area", c.maskproc.min_area},
                                    {"connectivity", c.maskproc.connectivity}})
                                  .dump();
    if (stamp_matches(dir, stamp)) {
      m = load_manifest(dir / "manifest.json");
      out.cached_stages.push_back("maskproc");
      say("maskproc: cached");
    } else {
      fs::remove(dir / "stage_stamp.json", ec);
      m = filter_manifest_masks(m, dir, c.maskproc, c.jobs);
      write_file(dir / "stage_stamp.json", stamp);
      say("maskproc: filtered");
    }
  }

  const auto [train_part, val_part] = split_grouped(m, c.split);
  save_manifest(train_part, c.output_root / "split" / "train.json");
  save_manifest(val_part, c.output_root / "split" / "val.json");

  MatrixConfig mc = matrix_config(c);
  mc.log = say;
  out.results = run_experiment_matrix(m, mc);

  for (auto layout : {TableLayout::table1, TableLayout::table2, TableLayout::table3}) {
    const std::string name = layout == TableLayout::table1 ? "table1" : layout == TableLayout::table2 ? "table2" : "table3";
    write_file(c.output_root / "tables" / (name + ".txt"), emit_table(out.results, layout, TableFormat::text));
    write_file(c.output_root / "tables" / (name + ".csv"), emit_table(out.results, layout, TableFormat::csv));
  }
  out.manifest = std::move(m);
  return out;
}

}  // namespace appledefect
