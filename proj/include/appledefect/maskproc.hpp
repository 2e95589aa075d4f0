// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "appledefect/image.hpp"

namespace appledefect {

struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // 0 or 1, row-major

  BinaryMask() = default;
  BinaryMask(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}

  bool at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v) { data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  std::size_t count() const;

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

/// Foreground is any pixel >= 128 in the first channel.
BinaryMask mask_from_image(const Image& img);
/// 1-channel image, foreground 255.
Image mask_to_image(const BinaryMask& m);

struct PixelXY {
  int x;
  int y;
  friend bool operator==(const PixelXY&, const PixelXY&) = default;
};

struct Region {
  int label = 0;  // 1-based, raster order of each region's first pixel
  std::size_t area = 0;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive bounding box
  std::vector<PixelXY> pixels;         // raster order
};

/// Two-pass union-find labeling. connectivity must be 4 or 8.
std::vector<Region> connected_components(const BinaryMask& mask, int connectivity = 8);

/// Keeps exactly the regions with area >= min_area.
BinaryMask filter_regions(const BinaryMask& mask, std::size_t min_area, int connectivity = 8);

/// Nearest-neighbor resize to target size, {0, 1} values replicated over 3 channels.
ImageF mask_to_model_input(const BinaryMask& mask, int target_width, int target_height);

}  // namespace appledefect
