// SPDX-License-Identifier: Apache-2.0
#include <array>
#include <cmath>

#include <gtest/gtest.h>

#include "appledefect/error.hpp"
#include "appledefect/registration.hpp"
#include "appledefect/rng.hpp"
#include "appledefect/synthgen.hpp"
#include "support.hpp"

using namespace appledefect;

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

std::vector<Correspondence> mapped(const Homography& h, const std::vector<Point2>& pts) {
  std::vector<Correspondence> out;
  for (auto p : pts) out.push_back({p, h.apply(p)});
  return out;
}

std::vector<Point2> random_points(Rng& rng, int n, double w = 960, double h = 830) {
  std::vector<Point2> pts;
  for (int i = 0; i < n; ++i) pts.push_back({rng.uniform(0, w), rng.uniform(0, h)});
  return pts;
}

Homography random_homography(Rng& rng) {
  Eigen::Matrix3d m;
  m << rng.uniform(0.8, 1.2), rng.uniform(-0.2, 0.2), rng.uniform(-50, 50),  //
      rng.uniform(-0.2, 0.2), rng.uniform(0.8, 1.2), rng.uniform(-50, 50),  //
      rng.uniform(-2e-4, 2e-4), rng.uniform(-2e-4, 2e-4), 1.0;
  return Homography(m);
}

double max_entry_diff(const Homography& a, const Homography& b) {
  return (a.matrix() - b.matrix()).cwiseAbs().maxCoeff();
}

double mean_corner_error(const Homography& est, const Homography& truth, int w, int h) {
  const std::array<Point2, 4> corners{{{0, 0}, {w - 1.0, 0}, {0, h - 1.0}, {w - 1.0, h - 1.0}}};
  double sum = 0.0;
  for (auto c : corners) {
    const auto a = est.apply(c), b = truth.apply(c);
    sum += std::hypot(a.x - b.x, a.y - b.y);
  }
  return sum / 4.0;
}

Image textured_render() {
  const FruitScene s = make_scene("stain_000", DefectClass::stain, 0.7, 1.0, 17);
  return render_view(s, 20.0, RenderMode::narrowband, 0.02).image;
}

MatcherConfig same_size(const Image& img) {
  MatcherConfig cfg;
  cfg.out_width = img.width;
  cfg.out_height = img.height;
  return cfg;
}

}  // namespace

TEST(Dlt, IdentityFromFourPoints) {
  const std::vector<Point2> pts{{0, 0}, {100, 0}, {0, 100}, {120, 90}};
  const auto h = estimate_homography_dlt(mapped(Homography::identity(), pts));
  EXPECT_LT(max_entry_diff(h, Homography::identity()), 1e-9);
  EXPECT_EQ(h.matrix()(2, 2), 1.0);
}

TEST(Dlt, TranslationFromFourPoints) {
  const std::vector<Point2> pts{{10, 20}, {300, 25}, {40, 500}, {700, 640}};
  std::vector<Correspondence> corrs;
  for (auto p : pts) corrs.push_back({p, {p.x + 5, p.y + 3}});
  const auto h = estimate_homography_dlt(corrs);
  Eigen::Matrix3d want = Eigen::Matrix3d::Identity();
  want(0, 2) = 5;
  want(1, 2) = 3;
  EXPECT_LT((h.matrix() - want).cwiseAbs().maxCoeff(), 1e-9);
  for (const auto& c : corrs) EXPECT_LT(reprojection_error(h, c), 1e-9);
}

TEST(Dlt, TooFewCorrespondences) {
  const std::vector<Point2> pts{{0, 0}, {1, 0}, {0, 1}};
  const auto corrs = mapped(Homography::identity(), pts);
  EXPECT_EQ(code_of([&] { estimate_homography_dlt(corrs); }), ErrorCode::InsufficientCorrespondences);
}

TEST(Dlt, CollinearIsDegenerate) {
  const std::vector<Point2> pts{{0, 0}, {1, 1}, {2, 2}, {3, 3}, {4, 4}};
  const auto corrs = mapped(Homography::translation(1, 2), pts);
  EXPECT_EQ(code_of([&] { estimate_homography_dlt(corrs); }), ErrorCode::DegenerateConfiguration);
}

TEST(Dlt, ExactOnRandomHomographies) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const auto truth = random_homography(rng);
    const int n = 4 + static_cast<int>(rng.below(20));
    const auto corrs = mapped(truth, random_points(rng, n));
    const auto h = estimate_homography_dlt(corrs);
    double worst = 0.0;
    for (const auto& c : corrs) worst = std::max(worst, reprojection_error(h, c));
    ASSERT_LE(worst, 1e-6) << "trial " << trial;
    ASSERT_LT(mean_corner_error(h, truth, 960, 830), 1e-6);
  }
}

TEST(Dlt, NormalizationInvariance) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto truth = random_homography(rng);
    const auto pts = random_points(rng, 12);
    auto corrs = mapped(truth, pts);
    for (auto& c : corrs) {
      c.dst.x += rng.normal(0, 0.5);
      c.dst.y += rng.normal(0, 0.5);
    }
    const auto s = Homography::similarity(0, 0, rng.uniform(-30, 30), rng.uniform(0.2, 5), rng.uniform(-1e3, 1e3),
                                          rng.uniform(-1e3, 1e3));
    std::vector<Correspondence> moved;
    for (const auto& c : corrs) moved.push_back({s.apply(c.src), s.apply(c.dst)});
    const auto h = estimate_homography_dlt(corrs);
    const auto h_moved = estimate_homography_dlt(moved);
    const Homography conj = s * h * s.inverse();
    ASSERT_LT(max_entry_diff(h_moved, conj), 1e-6) << "trial " << trial;
  }
}

TEST(Affine, ExactOnAffineMaps) {
  Eigen::Matrix3d m;
  m << 1.01, 0.02, 4.0, -0.03, 0.99, -7.0, 0, 0, 1;
  Rng rng(2);
  const auto corrs = mapped(Homography(m), random_points(rng, 10));
  EXPECT_LT(max_entry_diff(estimate_affine(corrs), Homography(m)), 1e-9);
  const std::vector<Correspondence> two(corrs.begin(), corrs.begin() + 2);
  EXPECT_EQ(code_of([&] { estimate_affine(two); }), ErrorCode::InsufficientCorrespondences);
}

TEST(Homography, InverseAndSingular) {
  Rng rng(4);
  const auto h = random_homography(rng);
  EXPECT_LT(max_entry_diff(h * h.inverse(), Homography::identity()), 1e-9);
  Eigen::Matrix3d sing = Eigen::Matrix3d::Zero();
  sing(0, 0) = 1;
  EXPECT_EQ(code_of([&] { Homography(sing).inverse(); }), ErrorCode::SingularHomography);
}

TEST(Ransac, SeparatesTranslationInliersFromOutliers) {
  Rng rng(77);
  const auto truth = Homography::translation(12, -7);
  auto corrs = mapped(truth, random_points(rng, 20));
  for (int i = 0; i < 5; ++i) {
    Correspondence c{{rng.uniform(0, 960), rng.uniform(0, 830)}, {rng.uniform(0, 960), rng.uniform(0, 830)}};
    corrs.push_back(c);
  }
  // Oracle: an index is an inlier iff its residual under the true transform is within the threshold.
  std::vector<std::size_t> expected;
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    if (reprojection_error(truth, corrs[i]) <= 2.0) expected.push_back(i);
  }
  ASSERT_EQ(expected.size(), 20u);
  const auto r = ransac_homography(corrs, 2.0, 1000, 5);
  EXPECT_EQ(r.inliers, expected);
  for (auto i : r.inliers) EXPECT_LE(reprojection_error(r.model, corrs[i]), 2.0);
  EXPECT_LT(mean_corner_error(r.model, truth, 960, 830), 1e-6);
}

TEST(Ransac, ConsensusResidualsWithinThreshold) {
  Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const auto truth = random_homography(rng);
    auto corrs = mapped(truth, random_points(rng, 30));
    for (auto& c : corrs) {
      c.dst.x += rng.normal(0, 0.7);
      c.dst.y += rng.normal(0, 0.7);
    }
    for (int i = 0; i < 10; ++i) corrs.push_back({{rng.uniform(0, 960), rng.uniform(0, 830)}, {rng.uniform(0, 960), rng.uniform(0, 830)}});
    const auto r = ransac_homography(corrs, 2.0, 500, static_cast<std::uint64_t>(trial));
    ASSERT_GE(r.inliers.size(), 4u);
    for (auto i : r.inliers) ASSERT_LE(reprojection_error(r.model, corrs[i]), 2.0);
  }
}

TEST(Ransac, CollinearHasNoModel) {
  std::vector<Point2> pts;
  for (int i = 0; i < 10; ++i) pts.push_back({10.0 * i, 5.0 * i});
  const auto corrs = mapped(Homography::translation(3, 3), pts);
  EXPECT_EQ(code_of([&] { ransac_homography(corrs, 2.0, 200, 1); }), ErrorCode::NoModelFound);
}

TEST(Ransac, DeterministicForSeed) {
  Rng rng(3);
  auto corrs = mapped(random_homography(rng), random_points(rng, 25));
  for (int i = 0; i < 8; ++i) corrs.push_back({{rng.uniform(0, 960), rng.uniform(0, 830)}, {rng.uniform(0, 960), rng.uniform(0, 830)}});
  for (auto& c : corrs) c.dst.x += rng.normal(0, 0.5);
  const auto a = ransac_homography(corrs, 2.0, 300, 9);
  const auto b = ransac_homography(corrs, 2.0, 300, 9);
  EXPECT_EQ(a.inliers, b.inliers);
  EXPECT_TRUE(a.model.matrix() == b.model.matrix());
}

TEST(Ransac, BadArguments) {
  const std::vector<Point2> pts{{0, 0}, {1, 0}, {0, 1}};
  EXPECT_EQ(code_of([&] { ransac_homography(mapped(Homography(), pts), 2.0, 10, 1); }),
            ErrorCode::InsufficientCorrespondences);
}

TEST(Warp, IdentityIsCenterCrop) {
  Rng rng(6);
  Image src(1000, 900, 1);
  for (auto& v : src.data) v = static_cast<std::uint8_t>(rng.below(256));
  const Image out = warp_and_crop(src, Homography::identity(), kStandardCropWidth, kStandardCropHeight);
  ASSERT_EQ(out.width, 960);
  ASSERT_EQ(out.height, 830);
  for (int y = 0; y < 830; ++y) {
    for (int x = 0; x < 960; ++x) ASSERT_EQ(out.at(x, y), src.at(x + 20, y + 35));
  }
  EXPECT_EQ(warp_and_crop(out, Homography::identity(), 960, 830), out);
}

TEST(Warp, TranslationShiftsPixels) {
  Rng rng(7);
  Image src(960, 830, 3);
  for (auto& v : src.data) v = static_cast<std::uint8_t>(rng.below(256));
  const Image base = warp_and_crop(src, Homography::identity(), 960, 830);
  const Image moved = warp_and_crop(src, Homography::translation(8, 0), 960, 830);
  for (int y = 0; y < 830; ++y) {
    for (int x = 0; x < 960; ++x) {
      for (int c = 0; c < 3; ++c) {
        if (x < 8) {
          ASSERT_EQ(moved.at(x, y, c), 0);
        } else {
          ASSERT_EQ(moved.at(x, y, c), base.at(x - 8, y, c));
        }
      }
    }
  }
}

TEST(Warp, OutputSizeAlwaysRequested) {
  Rng rng(1);
  for (auto [w, h] : std::vector<std::pair<int, int>>{{256, 222}, {960, 830}, {1280, 1024}, {900, 900}}) {
    const Image src(w, h, 1, 100);
    const Image out = warp_and_crop(src, random_homography(rng), 960, 830);
    EXPECT_EQ(out.width, 960);
    EXPECT_EQ(out.height, 830);
    EXPECT_EQ(out.channels, 1);
  }
  Eigen::Matrix3d sing = Eigen::Matrix3d::Zero();
  EXPECT_EQ(code_of([&] { warp_and_crop(Image(10, 10, 1), Homography(sing), 960, 830); }),
            ErrorCode::SingularHomography);
}

TEST(RegisterPair, SelfRegistrationIsIdentity) {
  const Image img = textured_render();
  const auto r = register_pair(img, img, same_size(img));
  EXPECT_GE(r.diagnostics.inliers, 4u);
  EXPECT_LT(mean_corner_error(r.h, Homography::identity(), img.width, img.height), 0.1);
  EXPECT_EQ(r.registered.width, img.width);
}

TEST(RegisterPair, RecoversTranslation) {
  const Image fixed = textured_render();
  const auto shift = Homography::translation(8, 5);
  const Image moving = warp_and_crop(fixed, shift, fixed.width, fixed.height);
  const auto r = register_pair(moving, fixed, same_size(fixed));
  EXPECT_LT(mean_corner_error(r.h, shift.inverse(), fixed.width, fixed.height), 1.0);
  EXPECT_GT(r.diagnostics.matches, 8u);
  EXPECT_LT(r.diagnostics.mean_residual, 2.0);
}

TEST(RegisterPair, RecoversSubpixelTranslation) {
  const Image fixed = textured_render();
  const auto shift = Homography::translation(6.4, -3.7);
  const Image moving = warp_and_crop(fixed, shift, fixed.width, fixed.height);
  const auto r = register_pair(moving, fixed, same_size(fixed));
  EXPECT_LT(mean_corner_error(r.h, shift.inverse(), fixed.width, fixed.height), 0.5);
}

TEST(RegisterPair, RefinementHandlesRotationWithShrink) {
  const Image fixed = textured_render();
  const auto truth = Homography::similarity(fixed.width / 2.0, fixed.height / 2.0, -2.8, 0.979, -0.7, -2.2);
  const Image moving = warp_and_crop(fixed, truth, fixed.width, fixed.height);
  auto cfg = same_size(fixed);
  const auto r = register_pair(moving, fixed, cfg);
  EXPECT_LT(mean_corner_error(r.h, truth.inverse(), fixed.width, fixed.height), 1.0);
  cfg.refine_passes = 0;
  const auto coarse = register_pair(moving, fixed, cfg);
  EXPECT_GE(mean_corner_error(coarse.h, truth.inverse(), fixed.width, fixed.height),
            mean_corner_error(r.h, truth.inverse(), fixed.width, fixed.height));
}

TEST(RegisterPair, OutputIsStandardCropByDefault) {
  const Image img = textured_render();
  const auto r = register_pair(img, img, MatcherConfig{});
  EXPECT_EQ(r.registered.width, 960);
  EXPECT_EQ(r.registered.height, 830);
}

TEST(RegisterPair, FlatImagesFailToMatch) {
  const Image gray(256, 222, 1, 128);
  EXPECT_EQ(code_of([&] { register_pair(gray, gray, same_size(gray)); }), ErrorCode::MatchFailure);
}

TEST(RegisterPair, ExternalCorrespondencesViaSidecar) {
  testsupport::TempDir dir;
  Rng rng(10);
  const auto shift = Homography::translation(-4, 6);
  const auto corrs = mapped(shift, random_points(rng, 12, 256, 222));
  save_correspondences(dir / "pair.matches.json", corrs);
  const auto loaded = load_correspondences(dir / "pair.matches.json");
  ASSERT_EQ(loaded.size(), corrs.size());
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    EXPECT_DOUBLE_EQ(loaded[i].src.x, corrs[i].src.x);
    EXPECT_DOUBLE_EQ(loaded[i].dst.y, corrs[i].dst.y);
  }
  const Image gray(256, 222, 1, 128);
  const auto r = register_pair(gray, gray, same_size(gray), std::span<const Correspondence>(loaded));
  EXPECT_EQ(r.diagnostics.inliers, 12u);
  EXPECT_LT(mean_corner_error(r.h, shift, 256, 222), 1e-6);
  EXPECT_EQ(code_of([&] { load_correspondences(dir / "missing.json"); }), ErrorCode::IoError);
}
