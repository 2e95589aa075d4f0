// SPDX-License-Identifier: Apache-2.0
#include "appledefect/synthgen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <optional>

#include "appledefect/error.hpp"
#include "appledefect/parallel.hpp"
#include "appledefect/rng.hpp"

namespace appledefect {

namespace fs = std::filesystem;
using nlohmann::json;

double band_transmission(const SpectralBand& band, double lambda_nm) {
  if (!(band.fwhm_nm > 0.0) || !std::isfinite(band.fwhm_nm) || !std::isfinite(band.center_nm)) {
    throw Error(ErrorCode::InvalidBand, "fwhm must be positive and finite");
  }
  const double d = (lambda_nm - band.center_nm) / band.fwhm_nm;
  return std::exp(-4.0 * std::numbers::ln2 * d * d);
}

double visible_sensitivity(VisibleChannel ch, double lambda_nm) {
  static constexpr double peaks[] = {600.0, 550.0, 450.0};
  const double peak = peaks[static_cast<int>(ch)];
  return std::max(0.0, 1.0 - std::abs(lambda_nm - peak) / 75.0);
}

ReflectanceCurve::ReflectanceCurve(std::vector<std::pair<double, double>> samples) : samples_(std::move(samples)) {
  if (samples_.empty()) throw Error(ErrorCode::ConfigError, "reflectance curve needs at least one sample");
  for (std::size_t i = 1; i < samples_.size(); ++i) {
    if (!(samples_[i].first > samples_[i - 1].first)) {
      throw Error(ErrorCode::ConfigError, "reflectance wavelengths must be strictly increasing");
    }
  }
  for (auto& [wl, r] : samples_) r = std::clamp(r, 0.0, 1.0);
}

double ReflectanceCurve::at(double lambda_nm) const {
  if (lambda_nm <= samples_.front().first) return samples_.front().second;
  if (lambda_nm >= samples_.back().first) return samples_.back().second;
  const auto it = std::upper_bound(samples_.begin(), samples_.end(), lambda_nm,
                                   [](double v, const auto& s) { return v < s.first; });
  const auto& [x1, y1] = *it;
  const auto& [x0, y0] = *(it - 1);
  const double t = (lambda_nm - x0) / (x1 - x0);
  return y0 + t * (y1 - y0);
}

double sample_intensity(const ReflectanceCurve& curve, const std::function<double(double)>& weight) {
  // Composite Simpson between the curve's breakpoints, where the curve is linear.
  std::vector<double> knots = {kSpectrumMinNm};
  for (const auto& [wl, r] : curve.samples()) {
    if (wl > knots.back() && wl < kSpectrumMaxNm) knots.push_back(wl);
  }
  knots.push_back(kSpectrumMaxNm);
  double num = 0.0;
  double den = 0.0;
  for (std::size_t k = 0; k + 1 < knots.size(); ++k) {
    const double a = knots[k], b = knots[k + 1];
    const int n = 2 * std::max(1, static_cast<int>(std::ceil((b - a) / 0.5)));
    const double h = (b - a) / n;
    for (int i = 0; i <= n; ++i) {
      const double wl = i == n ? b : a + i * h;
      const double simpson = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
      const double w = weight(wl) * simpson * h / 3.0;
      num += curve.at(wl) * w;
      den += w;
    }
  }
  return den > 0.0 ? num / den : 0.0;
}

double sample_intensity(const ReflectanceCurve& curve, const SpectralBand& band) {
  band_transmission(band, band.center_nm);  // validates
  return sample_intensity(curve, [&](double wl) { return band_transmission(band, wl); });
}

double sample_intensity(const ReflectanceCurve& curve, VisibleChannel ch) {
  return sample_intensity(curve, [&](double wl) { return visible_sensitivity(ch, wl); });
}

namespace presets {

// Invented spectra. Healthy red skin reflects strongly above ~620 nm; the
// defect materials are chosen so the 660 nm band separates them.
ReflectanceCurve healthy_skin() {
  return ReflectanceCurve({{400, 0.09}, {450, 0.08}, {500, 0.07}, {550, 0.11}, {580, 0.20},
                           {610, 0.42}, {640, 0.62}, {670, 0.66}, {700, 0.68}});
}
ReflectanceCurve bruise() {
  return ReflectanceCurve({{400, 0.07}, {450, 0.06}, {500, 0.06}, {550, 0.08}, {580, 0.12},
                           {610, 0.28}, {640, 0.36}, {670, 0.38}, {700, 0.40}});
}
ReflectanceCurve stain() { return ReflectanceCurve({{400, 0.03}, {550, 0.04}, {700, 0.06}}); }
ReflectanceCurve rot() {
  return ReflectanceCurve({{400, 0.05}, {500, 0.05}, {550, 0.06}, {600, 0.08}, {650, 0.11}, {700, 0.13}});
}
ReflectanceCurve lenticel() {
  return ReflectanceCurve({{400, 0.25}, {500, 0.28}, {550, 0.35}, {600, 0.55}, {650, 0.80}, {700, 0.82}});
}
ReflectanceCurve for_class(DefectClass c) {
  switch (c) {
    case DefectClass::bruise: return bruise();
    case DefectClass::stain: return stain();
    case DefectClass::rot: return rot();
  }
  return bruise();
}

}  // namespace presets

namespace {

constexpr double kMaxLatitude = 0.6;

double wrap_degrees(double a) {
  a = std::fmod(a, 360.0);
  if (a > 180.0) a -= 360.0;
  if (a <= -180.0) a += 360.0;
  return a;
}

struct FruitGeometry {
  double cx, cy, rx, ry;

  bool contains(double x, double y) const {
    const double u = (x - cx) / rx;
    const double v = (y - cy) / ry;
    return u * u + v * v <= 1.0;
  }
};

FruitGeometry geometry_of(const FruitScene& s, int width, int height) {
  return {s.center_x * width, s.center_y * height, s.radius_x * width, s.radius_y * height};
}

/// A blob as seen from one table angle, in pixel coordinates.
struct ProjectedBlob {
  const Blob* blob;
  double px, py, a, b;
  double x0, x1, y0, y1;

  bool contains(double x, double y) const {
    if (x < x0 || x > x1 || y < y0 || y > y1) return false;
    const double dx = (x - px) / a;
    const double dy = (y - py) / b;
    const double rho = std::sqrt(dx * dx + dy * dy);
    if (blob->irregularity == 0.0 || blob->harmonics.empty()) return rho <= 1.0;
    const double phi = std::atan2(dy, dx);
    double f = 0.0;
    for (std::size_t k = 0; k < blob->harmonics.size(); ++k) {
      f += blob->harmonics[k].first * std::sin(static_cast<double>(k + 2) * phi + blob->harmonics[k].second);
    }
    return rho <= 1.0 + blob->irregularity * f;
  }
};

bool blob_visible(const Blob& b, double angle_deg) {
  return std::abs(wrap_degrees(b.azimuth_deg - angle_deg)) <= kVisibleHalfAngleDeg;
}

std::optional<ProjectedBlob> project(const Blob& b, double angle_deg, const FruitGeometry& g) {
  if (!blob_visible(b, angle_deg)) return std::nullopt;
  const double alpha = wrap_degrees(b.azimuth_deg - angle_deg) * std::numbers::pi / 180.0;
  const double lat = std::clamp(b.latitude, -kMaxLatitude, kMaxLatitude);
  ProjectedBlob p{};
  p.blob = &b;
  p.px = g.cx + g.rx * std::sin(alpha) * std::sqrt(1.0 - lat * lat);
  p.py = g.cy + g.ry * lat;
  // Keep at least the pixel nearest the blob center covered, however oblique the view.
  const double min_radius = 1.0 / (1.0 - b.irregularity);
  p.a = std::max(b.radius_u * g.rx * std::cos(alpha), min_radius);
  p.b = std::max(b.radius_v * g.ry, min_radius);
  const double reach = 1.0 + b.irregularity;
  p.x0 = p.px - p.a * reach;
  p.x1 = p.px + p.a * reach;
  p.y0 = p.py - p.b * reach;
  p.y1 = p.py + p.b * reach;
  return p;
}

struct Material {
  double value[3];
};

Material intensities(const ReflectanceCurve& c, RenderMode mode, const SpectralBand& band) {
  Material m{};
  if (mode == RenderMode::narrowband) {
    m.value[0] = sample_intensity(c, band);
  } else {
    for (int ch = 0; ch < 3; ++ch) m.value[ch] = sample_intensity(c, static_cast<VisibleChannel>(ch));
  }
  return m;
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

std::vector<std::pair<double, double>> random_harmonics(Rng& rng, int count) {
  std::vector<std::pair<double, double>> h;
  double total = 0.0;
  for (int k = 0; k < count; ++k) {
    const double amp = rng.uniform(0.2, 1.0);
    total += amp;
    h.emplace_back(amp, rng.uniform(0.0, 2.0 * std::numbers::pi));
  }
  for (auto& [amp, phase] : h) amp /= total;
  return h;
}

}  // namespace

bool defect_visible(const DefectSpec& d, double angle_deg) { return blob_visible(d.region, angle_deg); }

RenderedView render_view(const FruitScene& scene, double angle_deg, RenderMode mode, double noise_sigma,
                         const RenderSettings& settings) {
  if (noise_sigma < 0.0) throw Error(ErrorCode::ConfigError, "noise_sigma must be >= 0");
  const int channels = mode == RenderMode::narrowband ? 1 : 3;
  const auto geom = geometry_of(scene, settings.width, settings.height);

  const Material base = intensities(scene.base_curve, mode, settings.band);
  const Material lent = intensities(scene.lenticel_curve, mode, settings.band);
  std::vector<Material> defect_materials;
  std::vector<ProjectedBlob> defects;
  std::vector<double> severities;
  for (const auto& d : scene.defects) {
    if (auto p = project(d.region, angle_deg, geom)) {
      defects.push_back(*p);
      defect_materials.push_back(intensities(d.curve, mode, settings.band));
      severities.push_back(d.severity);
    }
  }
  std::vector<ProjectedBlob> lenticels;
  for (const auto& l : scene.lenticels) {
    if (auto p = project(l, angle_deg, geom)) lenticels.push_back(*p);
  }

  // Narrowband pixels look up the scene through the inverse camera offset.
  const bool warp = mode == RenderMode::narrowband && !settings.misalignment.is_identity();
  const auto& mis = settings.misalignment;
  const double th = -mis.rotation_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(th), st = std::sin(th);
  const double icx = (settings.width - 1) / 2.0, icy = (settings.height - 1) / 2.0;

  RenderedView out{Image(settings.width, settings.height, channels), Image(settings.width, settings.height, 1)};
  Rng noise(derive_seed(scene.rng_seed, std::bit_cast<std::uint64_t>(angle_deg),
                        mode == RenderMode::narrowband ? 1u : 2u));

  for (int y = 0; y < settings.height; ++y) {
    for (int x = 0; x < settings.width; ++x) {
      double sx = x, sy = y;
      if (warp) {
        const double qx = x - icx - mis.dx, qy = y - icy - mis.dy;
        sx = icx + (ct * qx - st * qy) / mis.scale;
        sy = icy + (st * qx + ct * qy) / mis.scale;
      }
      double v[3] = {0.0, 0.0, 0.0};
      bool in_defect = false;
      if (geom.contains(sx, sy)) {
        for (int c = 0; c < channels; ++c) v[c] = base.value[c];
        for (const auto& l : lenticels) {
          if (l.contains(sx, sy)) {
            for (int c = 0; c < channels; ++c) {
              v[c] = (1.0 - scene.lenticel_strength) * v[c] + scene.lenticel_strength * lent.value[c];
            }
            break;
          }
        }
        for (std::size_t i = 0; i < defects.size(); ++i) {
          if (!defects[i].contains(sx, sy)) continue;
          in_defect = true;
          for (int c = 0; c < channels; ++c) {
            v[c] = (1.0 - severities[i]) * v[c] + severities[i] * defect_materials[i].value[c];
          }
        }
      }
      for (int c = 0; c < channels; ++c) {
        const double n = noise_sigma > 0.0 ? noise.normal() * noise_sigma : 0.0;
        out.image.at(x, y, c) = quantize(v[c] + n);
      }
      out.mask.at(x, y) = in_defect ? 255 : 0;
    }
  }
  return out;
}

FruitScene make_scene(const std::string& fruit_id, DefectClass cls, double severity_min, double severity_max,
                      std::uint64_t seed) {
  if (!(severity_min > 0.0 && severity_min <= severity_max && severity_max <= 1.0)) {
    throw Error(ErrorCode::ConfigError, "severity range must satisfy 0 < min <= max <= 1");
  }
  Rng rng(seed);
  FruitScene s;
  s.fruit_id = fruit_id;
  s.rng_seed = derive_seed(seed, {"noise"});
  s.center_x = 0.5 + rng.uniform(-0.02, 0.02);
  s.center_y = 0.5 + rng.uniform(-0.02, 0.02);
  s.radius_x = rng.uniform(0.38, 0.40);
  s.radius_y = rng.uniform(0.42, 0.44);

  const double tint = rng.uniform(0.98, 1.02);
  auto skin = presets::healthy_skin().samples();
  for (auto& [wl, r] : skin) r *= tint;
  s.base_curve = ReflectanceCurve(skin);
  s.lenticel_curve = presets::lenticel();

  for (int i = 0; i < 80; ++i) {
    Blob b;
    b.azimuth_deg = rng.uniform(0.0, 360.0);
    b.latitude = rng.uniform(-kMaxLatitude, kMaxLatitude);
    b.radius_u = b.radius_v = rng.uniform(0.012, 0.022);
    s.lenticels.push_back(b);
  }

  // Six defect sites roughly 60 degrees apart so every table angle shows one or more.
  const double phase = rng.uniform(0.0, 360.0);
  for (int site = 0; site < 6; ++site) {
    const double az = phase + 60.0 * site + rng.uniform(-8.0, 8.0);
    const double lat = rng.uniform(-0.45, 0.45);
    auto add = [&](Blob region) {
      DefectSpec d;
      d.defect_class = cls;
      d.region = std::move(region);
      d.severity = rng.uniform(severity_min, severity_max);
      d.curve = presets::for_class(cls);
      s.defects.push_back(std::move(d));
    };
    switch (cls) {
      case DefectClass::bruise: {
        Blob b{az, lat, rng.uniform(0.22, 0.3), rng.uniform(0.22, 0.3), rng.uniform(0.05, 0.2), {}};
        b.harmonics = random_harmonics(rng, 3);
        add(std::move(b));
        break;
      }
      case DefectClass::rot: {
        Blob b{az, lat, rng.uniform(0.3, 0.38), rng.uniform(0.3, 0.38), rng.uniform(0.2, 0.4), {}};
        b.harmonics = random_harmonics(rng, 3);
        add(std::move(b));
        break;
      }
      case DefectClass::stain: {
        const int speckles = 8 + static_cast<int>(rng.below(5));
        for (int k = 0; k < speckles; ++k) {
          Blob b;
          b.azimuth_deg = az + rng.uniform(-20.0, 20.0);
          b.latitude = std::clamp(lat + rng.uniform(-0.22, 0.22), -kMaxLatitude, kMaxLatitude);
          b.radius_u = b.radius_v = rng.uniform(0.07, 0.1);
          b.irregularity = 0.1;
          b.harmonics = random_harmonics(rng, 2);
          add(std::move(b));
        }
        break;
      }
    }
  }
  return s;
}

GenConfig gen_config_from_json(const json& j, GenConfig c) {
  try {
    if (j.contains("fruits_per_class")) {
      const auto& f = j["fruits_per_class"];
      if (f.is_number_integer()) {
        for (auto cls : kDefectClasses) c.fruits_per_class[cls] = f.get<int>();
      } else {
        for (auto& [key, value] : f.items()) {
          const auto cls = parse_defect_class(key);
          if (!cls) throw Error(ErrorCode::ConfigError, "unknown class in fruits_per_class: " + key);
          c.fruits_per_class[*cls] = value.get<int>();
        }
      }
    }
    if (j.contains("views_per_fruit")) c.views_per_fruit = j["views_per_fruit"].get<int>();
    if (j.contains("resolution")) {
      c.width = j["resolution"].at(0).get<int>();
      c.height = j["resolution"].at(1).get<int>();
    }
    if (j.contains("noise_sigma")) c.noise_sigma = j["noise_sigma"].get<double>();
    if (j.contains("severity_range")) {
      c.severity_min = j["severity_range"].at(0).get<double>();
      c.severity_max = j["severity_range"].at(1).get<double>();
    }
    if (j.contains("master_seed")) c.master_seed = j["master_seed"].get<std::uint64_t>();
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
    if (j.contains("nb_misalignment")) {
      const auto& m = j["nb_misalignment"];
      c.nb_misalignment.dx = m.value("dx", 0.0);
      c.nb_misalignment.dy = m.value("dy", 0.0);
      c.nb_misalignment.rotation_deg = m.value("rotation_deg", 0.0);
      c.nb_misalignment.scale = m.value("scale", 1.0);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("generator config: ") + e.what());
  }
  if (!(c.severity_min > 0.0 && c.severity_min <= c.severity_max && c.severity_max <= 1.0)) {
    throw Error(ErrorCode::ConfigError, "severity_range must satisfy 0 < min <= max <= 1");
  }
  if (c.noise_sigma < 0.0 || c.views_per_fruit < 1 || !(c.nb_misalignment.scale > 0.0)) {
    throw Error(ErrorCode::ConfigError, "noise_sigma >= 0, views_per_fruit >= 1 and misalignment scale > 0 required");
  }
  for (const auto& [cls, n] : c.fruits_per_class) {
    if (n < 0) throw Error(ErrorCode::ConfigError, "fruits_per_class must be >= 0");
  }
  return c;
}

json to_json(const GenConfig& c) {
  json f = json::object();
  for (auto& [cls, n] : c.fruits_per_class) f[std::string(to_string(cls))] = n;
  return {{"fruits_per_class", f},
          {"views_per_fruit", c.views_per_fruit},
          {"resolution", {c.width, c.height}},
          {"noise_sigma", c.noise_sigma},
          {"severity_range", {c.severity_min, c.severity_max}},
          {"master_seed", c.master_seed},
          {"output_dir", c.output_dir.generic_string()},
          {"nb_misalignment",
           {{"dx", c.nb_misalignment.dx},
            {"dy", c.nb_misalignment.dy},
            {"rotation_deg", c.nb_misalignment.rotation_deg},
            {"scale", c.nb_misalignment.scale}}}};
}

std::string fruit_name(DefectClass cls, int index) {
  char id[64];
  std::snprintf(id, sizeof id, "%s_%03d", std::string(to_string(cls)).c_str(), index);
  return id;
}

double view_angle_deg(int view, int views_per_fruit) { return 360.0 * view / views_per_fruit; }

Manifest plan_dataset(const GenConfig& config) {
  if (config.views_per_fruit < 1 || config.width < 16 || config.height < 16) {
    throw Error(ErrorCode::ConfigError, "views_per_fruit >= 1 and resolution >= 16x16 required");
  }
  Manifest m;
  m.root = config.output_dir;
  for (auto cls : kDefectClasses) {
    const auto it = config.fruits_per_class.find(cls);
    const int n = it == config.fruits_per_class.end() ? 0 : it->second;
    for (int i = 0; i < n; ++i) {
      const std::string id = fruit_name(cls, i);
      const fs::path dir = fs::path(std::string(to_string(cls))) / id;
      for (int view = 0; view < config.views_per_fruit; ++view) {
        char stem[16];
        std::snprintf(stem, sizeof stem, "%03d", view);
        CaptureRecord r;
        r.fruit_id = id;
        r.view_index = view;
        r.defect_class = cls;
        r.visible_path = dir / (std::string(stem) + "_vis.png");
        r.narrowband_path = dir / (std::string(stem) + "_nb.png");
        r.mask_path = dir / (std::string(stem) + "_mask.png");
        m.records.push_back(std::move(r));
      }
    }
  }
  return m;
}

FruitScene scene_for(const GenConfig& config, DefectClass cls, const std::string& fruit_id) {
  return make_scene(fruit_id, cls, config.severity_min, config.severity_max,
                    derive_seed(config.master_seed, {"fruit", fruit_id}));
}

Manifest generate_dataset(const GenConfig& config, unsigned jobs) {
  Manifest m = plan_dataset(config);
  std::error_code ec;
  fs::create_directories(config.output_dir, ec);
  if (ec || !fs::is_directory(config.output_dir)) {
    throw Error(ErrorCode::OutputNotWritable, config.output_dir.string());
  }

  const auto views = static_cast<std::size_t>(config.views_per_fruit);
  std::vector<FruitScene> scenes;
  for (std::size_t i = 0; i < m.records.size(); i += views) {
    scenes.push_back(scene_for(config, m.records[i].defect_class, m.records[i].fruit_id));
  }

  RenderSettings settings;
  settings.width = config.width;
  settings.height = config.height;
  settings.misalignment = config.nb_misalignment;

  parallel_for(m.records.size(), jobs, [&](std::size_t item) {
    const auto& scene = scenes[item / views];
    const auto& r = m.records[item];
    const double angle = view_angle_deg(r.view_index, config.views_per_fruit);
    const auto vis = render_view(scene, angle, RenderMode::visible, config.noise_sigma, settings);
    const auto nb = render_view(scene, angle, RenderMode::narrowband, config.noise_sigma, settings);
    write_png(config.output_dir / r.visible_path, vis.image);
    write_png(config.output_dir / r.narrowband_path, nb.image);
    write_png(config.output_dir / *r.mask_path, vis.mask);
  });

  save_manifest(m, config.output_dir / "manifest.json");
  return m;
}

}  // namespace appledefect
