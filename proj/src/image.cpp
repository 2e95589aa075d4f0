// SPDX-License-Identifier: Apache-2.0
#include "appledefect/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "appledefect/error.hpp"

namespace appledefect {

ImageF to_luma(const Image& img) {
  ImageF out(img.width, img.height, 1);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (img.channels == 1) {
        out.at(x, y) = img.at(x, y) / 255.0;
      } else {
        out.at(x, y) = (0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2)) / 255.0;
      }
    }
  }
  return out;
}

ImageF to_unit(const Image& img) {
  ImageF out(img.width, img.height, img.channels);
  std::transform(img.data.begin(), img.data.end(), out.data.begin(), [](std::uint8_t v) { return v / 255.0; });
  return out;
}

namespace {

struct Taps {
  int first;
  std::vector<double> w;
};

// Triangle kernel widened by the scale factor when shrinking, so every source
// pixel contributes; reduces to plain clamped bilinear when enlarging.
std::vector<Taps> triangle_taps(int src, int dst) {
  const double scale = static_cast<double>(src) / dst;
  const double support = std::max(scale, 1.0);
  std::vector<Taps> taps(static_cast<std::size_t>(dst));
  for (int o = 0; o < dst; ++o) {
    const double center = (o + 0.5) * scale;
    const int lo = std::max(0, static_cast<int>(std::floor(center - support)));
    const int hi = std::min(src - 1, static_cast<int>(std::ceil(center + support)));
    auto& t = taps[static_cast<std::size_t>(o)];
    t.first = lo;
    double total = 0.0;
    for (int i = lo; i <= hi; ++i) {
      const double w = std::max(0.0, 1.0 - std::abs(i + 0.5 - center) / support);
      t.w.push_back(w);
      total += w;
    }
    if (total <= 0.0) {
      const int nearest = std::clamp(static_cast<int>(center), 0, src - 1);
      t.first = nearest;
      t.w.assign(1, 1.0);
      total = 1.0;
    }
    for (auto& w : t.w) w /= total;
  }
  return taps;
}

}  // namespace

ImageF resize_bilinear(const ImageF& img, int width, int height) {
  if (img.width == width && img.height == height) return img;
  const auto tx = triangle_taps(img.width, width);
  const auto ty = triangle_taps(img.height, height);
  const int ch = img.channels;
  ImageF rows(width, img.height, ch);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < width; ++x) {
      const auto& t = tx[static_cast<std::size_t>(x)];
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < t.w.size(); ++k) acc += t.w[k] * img.at(t.first + static_cast<int>(k), y, c);
        rows.at(x, y, c) = acc;
      }
    }
  }
  ImageF out(width, height, ch);
  for (int y = 0; y < height; ++y) {
    const auto& t = ty[static_cast<std::size_t>(y)];
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < t.w.size(); ++k) acc += t.w[k] * rows.at(x, t.first + static_cast<int>(k), c);
        out.at(x, y, c) = acc;
      }
    }
  }
  return out;
}

ImageF to_three_channels(const ImageF& img) {
  if (img.channels == 3) return img;
  ImageF out(img.width, img.height, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    out.data[3 * i] = out.data[3 * i + 1] = out.data[3 * i + 2] = img.data[i];
  }
  return out;
}

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw Error(ErrorCode::IoError, "cannot read PNG " + path.string() + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image img(static_cast<int>(png.width), static_cast<int>(png.height), color ? 3 : 1);
  if (!png_image_finish_read(&png, nullptr, img.data.data(), 0, nullptr)) {
    png_image_free(&png);
    throw Error(ErrorCode::IoError, "cannot decode PNG " + path.string() + ": " + png.message);
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw Error(ErrorCode::IoError, "PNG writer supports 1 or 3 channels");
  }
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, img.data.data(), 0, nullptr)) {
    throw Error(ErrorCode::OutputNotWritable, "cannot write PNG " + path.string() + ": " + png.message);
  }
}

}  // namespace appledefect
