// SPDX-License-Identifier: Apache-2.0
#include <set>

#include <gtest/gtest.h>

#include "appledefect/error.hpp"
#include "appledefect/maskproc.hpp"
#include "oracles.hpp"

using namespace appledefect;

namespace {

BinaryMask block(int w, int h, int x0, int y0, int bw, int bh) {
  BinaryMask m(w, h);
  for (int y = y0; y < y0 + bh; ++y) {
    for (int x = x0; x < x0 + bw; ++x) m.set(x, y, true);
  }
  return m;
}

}  // namespace

TEST(Components, EmptyMaskHasNoRegions) {
  EXPECT_TRUE(connected_components(BinaryMask(10, 7)).empty());
  EXPECT_TRUE(connected_components(BinaryMask()).empty());
}

TEST(Components, SolidBlock) {
  const auto regions = connected_components(block(8, 8, 2, 3, 3, 3));
  ASSERT_EQ(regions.size(), 1u);
  EXPECT_EQ(regions[0].label, 1);
  EXPECT_EQ(regions[0].area, 9u);
  EXPECT_EQ(regions[0].x0, 2);
  EXPECT_EQ(regions[0].y0, 3);
  EXPECT_EQ(regions[0].x1, 4);
  EXPECT_EQ(regions[0].y1, 5);
  EXPECT_EQ(regions[0].pixels.front(), (PixelXY{2, 3}));
}

TEST(Components, DiagonalNeighboursDependOnConnectivity) {
  BinaryMask m(3, 3);
  m.set(0, 0, true);
  m.set(1, 1, true);
  EXPECT_EQ(connected_components(m, 8).size(), 1u);
  EXPECT_EQ(connected_components(m, 4).size(), 2u);
}

TEST(Components, BadConnectivityThrows) { EXPECT_THROW(connected_components(BinaryMask(2, 2), 6), Error); }

TEST(Components, LabelsFollowRasterOrderOfFirstPixel) {
  // A U shape whose arms are joined only on the last row gets one label.
  BinaryMask m(5, 4);
  for (int y = 0; y < 4; ++y) {
    m.set(0, y, true);
    m.set(4, y, true);
  }
  for (int x = 0; x < 5; ++x) m.set(x, 3, true);
  m.set(2, 0, true);
  const auto r = connected_components(m, 4);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].pixels.front(), (PixelXY{0, 0}));
  EXPECT_EQ(r[0].area, 11u);
  EXPECT_EQ(r[1].pixels.front(), (PixelXY{2, 0}));
}

TEST(Components, MatchFloodFillOracleOnRandomMasks) {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const BinaryMask m = oracle::random_mask(rng);
    for (int conn : {4, 8}) {
      const auto expected = oracle::flood_fill_labels(m, conn);
      const auto regions = connected_components(m, conn);
      std::vector<int> got(m.data.size(), 0);
      std::size_t total = 0;
      for (const auto& r : regions) {
        for (const auto& p : r.pixels) {
          auto& slot = got[static_cast<std::size_t>(p.y) * m.width + p.x];
          ASSERT_EQ(slot, 0) << "regions overlap";
          slot = r.label;
        }
        total += r.area;
        ASSERT_EQ(r.area, r.pixels.size());
      }
      ASSERT_EQ(total, m.count());
      // Flood fill discovers regions in raster order too, so labels must agree exactly.
      ASSERT_EQ(got, expected) << "trial " << trial << " connectivity " << conn;
    }
  }
}

TEST(Filter, MinAreaOneIsIdentity) {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const auto m = oracle::random_mask(rng);
    EXPECT_EQ(filter_regions(m, 1), m);
  }
}

TEST(Filter, DropsSmallRegions) {
  BinaryMask m = block(40, 40, 1, 1, 2, 2);  // area 4
  const BinaryMask big = block(40, 40, 20, 20, 12, 10);  // area 120
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] |= big.data[i];
  const auto areas = oracle::region_areas(oracle::flood_fill_labels(m, 8));
  ASSERT_EQ(areas, (std::vector<std::size_t>{4, 120}));
  EXPECT_EQ(filter_regions(m, 10), big);
}

TEST(Filter, IdempotentAndMonotone) {
  Rng rng(9);
  for (int i = 0; i < 100; ++i) {
    const auto m = oracle::random_mask(rng);
    const std::size_t a = 1 + rng.below(8);
    const std::size_t b = a + rng.below(8);
    const auto fa = filter_regions(m, a);
    const auto fb = filter_regions(m, b);
    EXPECT_EQ(filter_regions(fa, a), fa);
    for (std::size_t p = 0; p < m.data.size(); ++p) ASSERT_LE(fb.data[p], fa.data[p]);
  }
}

TEST(Filter, ZeroMinAreaRejected) { EXPECT_THROW(filter_regions(BinaryMask(3, 3), 0), Error); }

TEST(ModelInput, ShapeAndValues) {
  const auto m = block(960, 830, 400, 300, 100, 100);
  const ImageF t = mask_to_model_input(m, 224, 224);
  EXPECT_EQ(t.width, 224);
  EXPECT_EQ(t.height, 224);
  EXPECT_EQ(t.channels, 3);
  for (std::size_t p = 0; p < t.data.size(); p += 3) {
    ASSERT_TRUE(t.data[p] == 0.0 || t.data[p] == 1.0);
    ASSERT_EQ(t.data[p], t.data[p + 1]);
    ASSERT_EQ(t.data[p], t.data[p + 2]);
  }
  for (auto v : mask_to_model_input(BinaryMask(960, 830), 224, 224).data) ASSERT_EQ(v, 0.0);
}

TEST(ModelInput, CenteredBlockScalesByIndexMapping) {
  const auto m = block(960, 830, 430, 365, 100, 100);
  const ImageF t = mask_to_model_input(m, 224, 224);
  // Oracle: each output pixel reads source floor((i + 0.5) * src / dst).
  std::size_t expected = 0, got = 0;
  for (int y = 0; y < 224; ++y) {
    for (int x = 0; x < 224; ++x) {
      const int sx = (2 * x + 1) * 960 / (2 * 224);
      const int sy = (2 * y + 1) * 830 / (2 * 224);
      expected += m.at(sx, sy);
      got += t.at(x, y, 0) == 1.0;
    }
  }
  EXPECT_EQ(got, expected);
  const double scaled = 100.0 * 224 / 960 * 100.0 * 224 / 830;
  EXPECT_NEAR(static_cast<double>(got), scaled, 2.0 * (100.0 * 224 / 960 + 100.0 * 224 / 830) + 4);
}

TEST(MaskImage, RoundTrip) {
  Rng rng(1);
  const auto m = oracle::random_mask(rng);
  const Image img = mask_to_image(m);
  for (auto v : img.data) ASSERT_TRUE(v == 0 || v == 255);
  EXPECT_EQ(mask_from_image(img), m);
}
