// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace appledefect {

/// Interleaved (row-major, channel-last) pixel buffer.
template <typename T>
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<T> data;

  Raster() = default;
  Raster(int w, int h, int c, T fill = T{})
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(c), fill) {}

  std::size_t index(int x, int y, int c = 0) const {
    assert(x >= 0 && x < width && y >= 0 && y < height && c >= 0 && c < channels);
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) *
               static_cast<std::size_t>(channels) +
           static_cast<std::size_t>(c);
  }
  T& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
  const T& at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }

  bool empty() const { return data.empty(); }
  bool same_shape(const Raster& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
  friend bool operator==(const Raster&, const Raster&) = default;
};

using Image = Raster<std::uint8_t>;
using ImageF = Raster<double>;

/// Rec.601 luma of a 3-channel image (or a copy of a 1-channel one), scaled to [0,1].
ImageF to_luma(const Image& img);
/// 8-bit to [0,1] doubles, channel count preserved.
ImageF to_unit(const Image& img);
/// Bilinear resize with pixel-center alignment and edge clamping; when shrinking,
/// the triangle filter is stretched by the scale factor (antialiased).
ImageF resize_bilinear(const ImageF& img, int width, int height);
/// Replicate a 1-channel image into 3 channels; 3-channel input is returned as is.
ImageF to_three_channels(const ImageF& img);

Image read_png(const std::filesystem::path& path);
/// Writes an 8-bit gray (1 channel) or RGB (3 channels) PNG. Creates parent directories.
void write_png(const std::filesystem::path& path, const Image& img);

}  // namespace appledefect
