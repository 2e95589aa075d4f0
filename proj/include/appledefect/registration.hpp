// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "appledefect/image.hpp"

namespace appledefect {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// src is a pixel in the moving image, dst the matching pixel in the fixed image.
struct Correspondence {
  Point2 src;
  Point2 dst;
};

/// Projective map dst ~ H * src, stored with h(2,2) == 1 whenever h(2,2) != 0.
class Homography {
 public:
  Homography() : h_(Eigen::Matrix3d::Identity()) {}
  explicit Homography(const Eigen::Matrix3d& h);

  static Homography identity() { return Homography(); }
  static Homography translation(double dx, double dy);
  /// Rotation (degrees) and scale about (cx, cy), followed by a translation.
  static Homography similarity(double cx, double cy, double rotation_deg, double scale, double dx, double dy);

  const Eigen::Matrix3d& matrix() const { return h_; }
  Point2 apply(Point2 p) const;
  /// Throws SingularHomography when not invertible.
  Homography inverse() const;
  Homography operator*(const Homography& rhs) const { return Homography(h_ * rhs.h_); }

 private:
  Eigen::Matrix3d h_;
};

enum class TransformFamily { homography, affine };

double reprojection_error(const Homography& h, const Correspondence& c);

/// Normalized DLT over >= 4 correspondences (Hartley normalization, SVD solve).
Homography estimate_homography_dlt(std::span<const Correspondence> corrs);
/// Least-squares affine fit over >= 3 correspondences, returned as a homography.
Homography estimate_affine(std::span<const Correspondence> corrs);

struct RansacResult {
  Homography model;
  std::vector<std::size_t> inliers;  // ascending
};

RansacResult ransac_homography(std::span<const Correspondence> corrs, double inlier_threshold_px, int max_iterations,
                               std::uint64_t seed, TransformFamily family = TransformFamily::homography);

/// Inverse-warp `image` into the fixed frame (same size as `image`), then
/// center-crop or zero-pad to out_width x out_height. Bilinear; outside is 0.
template <typename T>
Raster<T> warp_and_crop(const Raster<T>& image, const Homography& h, int out_width, int out_height);

inline constexpr int kStandardCropWidth = 960;
inline constexpr int kStandardCropHeight = 830;
inline constexpr int kRefineSearch = 3;

struct MatcherConfig {
  int grid = 8;             // grid x grid template patches over the fixed image
  int patch = 32;           // template side, px
  int search = 24;          // +- search radius, px
  double min_ncc = 0.6;
  double ransac_threshold = 2.0;
  int ransac_iterations = 1000;
  std::uint64_t seed = 0;
  TransformFamily family = TransformFamily::homography;
  int refine_passes = 2;    // re-match on the pre-warped moving image (built-in matcher only)
  int out_width = kStandardCropWidth;
  int out_height = kStandardCropHeight;
};

/// Grid template matcher: normalized cross-correlation of fixed-image patches
/// searched in the moving image. Flat patches are skipped.
std::vector<Correspondence> match_ncc_grid(const ImageF& moving, const ImageF& fixed, const MatcherConfig& cfg);

struct RegistrationDiagnostics {
  std::size_t matches = 0;
  std::size_t inliers = 0;
  double mean_residual = 0.0;
};

struct RegistrationResult {
  Image registered;
  Homography h;
  RegistrationDiagnostics diagnostics;
};

/// Aligns `moving` (narrowband) onto `fixed` (visible; its luma is matched).
/// When `external` is given those correspondences replace the built-in matcher.
RegistrationResult register_pair(const Image& moving, const Image& fixed, const MatcherConfig& cfg,
                                 std::optional<std::span<const Correspondence>> external = std::nullopt);

/// Sidecar format: JSON array of {"src": [x, y], "dst": [x, y]}.
std::vector<Correspondence> load_correspondences(const std::filesystem::path& path);
void save_correspondences(const std::filesystem::path& path, std::span<const Correspondence> corrs);

}  // namespace appledefect
