// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "appledefect/dataset.hpp"
#include "appledefect/image.hpp"

namespace appledefect {

/// Gaussian bandpass filter profile pinned by its FWHM.
struct SpectralBand {
  double center_nm = 660.0;
  double fwhm_nm = 60.0;
};

/// The BP660 filter of the narrowband camera.
inline constexpr SpectralBand kBand660{660.0, 60.0};

/// Peak-normalized transmission; 0.5 exactly at center +- fwhm/2.
double band_transmission(const SpectralBand& band, double lambda_nm);

enum class VisibleChannel { red = 0, green = 1, blue = 2 };

/// Triangular sensitivity, peaks 600/550/450 nm, 150 nm base width.
double visible_sensitivity(VisibleChannel ch, double lambda_nm);

inline constexpr double kSpectrumMinNm = 400.0;
inline constexpr double kSpectrumMaxNm = 700.0;

/// Piecewise-linear reflectance over [400, 700] nm, constant beyond the end samples.
class ReflectanceCurve {
 public:
  ReflectanceCurve() : ReflectanceCurve({{kSpectrumMinNm, 0.0}, {kSpectrumMaxNm, 0.0}}) {}
  /// Wavelengths must be strictly increasing; reflectances are clamped to [0, 1].
  explicit ReflectanceCurve(std::vector<std::pair<double, double>> samples);

  static ReflectanceCurve constant(double r) { return ReflectanceCurve({{kSpectrumMinNm, r}, {kSpectrumMaxNm, r}}); }

  double at(double lambda_nm) const;
  const std::vector<std::pair<double, double>>& samples() const { return samples_; }

 private:
  std::vector<std::pair<double, double>> samples_;
};

/// Weighted mean of the curve over [400, 700] nm (Simpson between curve breakpoints).
double sample_intensity(const ReflectanceCurve& curve, const std::function<double(double)>& weight);
double sample_intensity(const ReflectanceCurve& curve, const SpectralBand& band);
double sample_intensity(const ReflectanceCurve& curve, VisibleChannel ch);

namespace presets {
ReflectanceCurve healthy_skin();
ReflectanceCurve bruise();
ReflectanceCurve stain();
ReflectanceCurve rot();
ReflectanceCurve lenticel();
ReflectanceCurve for_class(DefectClass c);
}  // namespace presets

/// Surface blob in fruit coordinates. azimuth rotates with the table; latitude
/// and radii are fractions of the fruit's vertical/horizontal semi-axes.
struct Blob {
  double azimuth_deg = 0.0;
  double latitude = 0.0;  // [-1, 1]
  double radius_u = 0.1;  // fraction of fruit x semi-axis
  double radius_v = 0.1;  // fraction of fruit y semi-axis
  double irregularity = 0.0;  // [0, 0.5]
  std::vector<std::pair<double, double>> harmonics;  // (amplitude, phase) for k = 2, 3, ...
};

struct DefectSpec {
  DefectClass defect_class = DefectClass::bruise;
  Blob region;
  double severity = 1.0;  // (0, 1]
  ReflectanceCurve curve;
};

struct FruitScene {
  std::string fruit_id;
  ReflectanceCurve base_curve;
  std::vector<DefectSpec> defects;
  std::vector<Blob> lenticels;  // texture only, never part of the mask
  ReflectanceCurve lenticel_curve;
  double lenticel_strength = 0.5;
  double center_x = 0.5;  // fractions of image size
  double center_y = 0.5;
  double radius_x = 0.40;
  double radius_y = 0.44;
  std::uint64_t rng_seed = 0;
};

/// Surface features farther than this from the viewing direction are hidden.
inline constexpr double kVisibleHalfAngleDeg = 75.0;

/// Similarity transform applied to the narrowband camera relative to the visible one.
struct Misalignment {
  double dx = 0.0;
  double dy = 0.0;
  double rotation_deg = 0.0;
  double scale = 1.0;
  bool is_identity() const { return dx == 0.0 && dy == 0.0 && rotation_deg == 0.0 && scale == 1.0; }
};

enum class RenderMode { narrowband, visible };

struct RenderSettings {
  int width = 256;
  int height = 222;
  SpectralBand band = kBand660;
  Misalignment misalignment;  // narrowband mode only
};

struct RenderedView {
  Image image;  // 1 channel (narrowband) or 3 channels (visible)
  Image mask;   // 1 channel {0, 255}, in the frame of `image`
};

bool defect_visible(const DefectSpec& d, double angle_deg);
RenderedView render_view(const FruitScene& scene, double angle_deg, RenderMode mode, double noise_sigma,
                         const RenderSettings& settings = {});

/// Random scene for one fruit of the given class.
FruitScene make_scene(const std::string& fruit_id, DefectClass cls, double severity_min, double severity_max,
                      std::uint64_t seed);

struct GenConfig {
  std::map<DefectClass, int> fruits_per_class = {
      {DefectClass::bruise, 6}, {DefectClass::stain, 20}, {DefectClass::rot, 20}};
  int views_per_fruit = 120;
  int width = 256;
  int height = 222;
  double noise_sigma = 0.02;
  double severity_min = 0.5;
  double severity_max = 1.0;
  std::uint64_t master_seed = 42;
  std::filesystem::path output_dir = "synth";
  Misalignment nb_misalignment;
};

GenConfig gen_config_from_json(const nlohmann::json& j, GenConfig base = {});
nlohmann::json to_json(const GenConfig& c);

/// "<class>_<index:03>".
std::string fruit_name(DefectClass cls, int index);
double view_angle_deg(int view, int views_per_fruit);
/// Records generate_dataset would write, without rendering anything.
Manifest plan_dataset(const GenConfig& config);
/// The scene generate_dataset renders for a fruit.
FruitScene scene_for(const GenConfig& config, DefectClass cls, const std::string& fruit_id);

/// Renders every (fruit, view) and writes `<out>/<class>/<fruit>/<view>_{vis,nb,mask}.png`
/// plus `<out>/manifest.json`.
Manifest generate_dataset(const GenConfig& config, unsigned jobs = 1);

}  // namespace appledefect
