// SPDX-License-Identifier: Apache-2.0
#include "appledefect/maskproc.hpp"

#include <algorithm>

#include "appledefect/error.hpp"

namespace appledefect {

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

BinaryMask mask_from_image(const Image& img) {
  BinaryMask m(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) m.set(x, y, img.at(x, y, 0) >= 128);
  return m;
}

Image mask_to_image(const BinaryMask& m) {
  Image img(m.width, m.height, 1);
  for (std::size_t i = 0; i < m.data.size(); ++i) img.data[i] = m.data[i] ? 255 : 0;
  return img;
}

namespace {

class DisjointSet {
 public:
  int make() {
    parent_.push_back(static_cast<int>(parent_.size()));
    return parent_.back();
  }
  int find(int x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  // The smaller root wins so roots stay the earliest provisional label.
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) parent_[b] = a;
    else parent_[a] = b;
  }

 private:
  std::vector<int> parent_;
};

}  // namespace

std::vector<Region> connected_components(const BinaryMask& mask, int connectivity) {
  if (connectivity != 4 && connectivity != 8) throw Error(ErrorCode::ConfigError, "connectivity must be 4 or 8");
  const int w = mask.width, h = mask.height;
  std::vector<int> provisional(static_cast<std::size_t>(w) * h, -1);
  DisjointSet sets;

  auto label_at = [&](int x, int y) { return provisional[static_cast<std::size_t>(y) * w + x]; };

  // First pass: provisional labels from already-visited neighbours.
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(x, y)) continue;
      int current = -1;
      auto consider = [&](int nx, int ny) {
        if (nx < 0 || ny < 0 || nx >= w) return;
        const int l = label_at(nx, ny);
        if (l < 0) return;
        if (current < 0) current = l;
        else sets.unite(current, l);
      };
      consider(x - 1, y);
      consider(x, y - 1);
      if (connectivity == 8) {
        consider(x - 1, y - 1);
        consider(x + 1, y - 1);
      }
      if (current < 0) current = sets.make();
      provisional[static_cast<std::size_t>(y) * w + x] = current;
    }
  }

  // Second pass: resolve roots and number regions in raster order of first pixel.
  std::vector<Region> regions;
  std::vector<int> root_to_region;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int l = label_at(x, y);
      if (l < 0) continue;
      const int root = sets.find(l);
      if (static_cast<std::size_t>(root) >= root_to_region.size()) root_to_region.resize(root + 1, -1);
      int& ri = root_to_region[root];
      if (ri < 0) {
        ri = static_cast<int>(regions.size());
        Region r;
        r.label = ri + 1;
        r.x0 = r.x1 = x;
        r.y0 = r.y1 = y;
        regions.push_back(std::move(r));
      }
      auto& r = regions[ri];
      r.pixels.push_back({x, y});
      r.x0 = std::min(r.x0, x);
      r.x1 = std::max(r.x1, x);
      r.y1 = std::max(r.y1, y);
    }
  }
  for (auto& r : regions) r.area = r.pixels.size();
  return regions;
}

BinaryMask filter_regions(const BinaryMask& mask, std::size_t min_area, int connectivity) {
  if (min_area < 1) throw Error(ErrorCode::ConfigError, "min_area must be >= 1");
  BinaryMask out(mask.width, mask.height);
  for (const auto& r : connected_components(mask, connectivity)) {
    if (r.area < min_area) continue;
    for (const auto& p : r.pixels) out.set(p.x, p.y, true);
  }
  return out;
}

ImageF mask_to_model_input(const BinaryMask& mask, int target_width, int target_height) {
  ImageF out(target_width, target_height, 3);
  if (mask.width == 0 || mask.height == 0) return out;
  for (int y = 0; y < target_height; ++y) {
    const int sy = std::min(mask.height - 1, static_cast<int>((y + 0.5) * mask.height / target_height));
    for (int x = 0; x < target_width; ++x) {
      const int sx = std::min(mask.width - 1, static_cast<int>((x + 0.5) * mask.width / target_width));
      const double v = mask.at(sx, sy) ? 1.0 : 0.0;
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = v;
    }
  }
  return out;
}

}  // namespace appledefect
