// SPDX-License-Identifier: Apache-2.0
// Independent reference implementations used only by tests.
#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "appledefect/maskproc.hpp"
#include "appledefect/rng.hpp"

namespace oracle {

/// Recursive flood fill; returns per-pixel region ids (0 = background, ids in raster discovery order).
inline std::vector<int> flood_fill_labels(const appledefect::BinaryMask& m, int connectivity) {
  std::vector<int> label(m.data.size(), 0);
  auto fill = [&](auto&& self, int x, int y, int id) -> void {
    if (x < 0 || y < 0 || x >= m.width || y >= m.height) return;
    const auto i = static_cast<std::size_t>(y) * m.width + x;
    if (!m.data[i] || label[i]) return;
    label[i] = id;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        if ((dx == 0 && dy == 0) || (connectivity == 4 && dx != 0 && dy != 0)) continue;
        self(self, x + dx, y + dy, id);
      }
    }
  };
  int next = 0;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      const auto i = static_cast<std::size_t>(y) * m.width + x;
      if (m.data[i] && !label[i]) fill(fill, x, y, ++next);
    }
  }
  return label;
}

inline std::vector<std::size_t> region_areas(const std::vector<int>& labels) {
  std::vector<std::size_t> areas;
  for (int l : labels) {
    if (l == 0) continue;
    if (static_cast<std::size_t>(l) > areas.size()) areas.resize(static_cast<std::size_t>(l), 0);
    ++areas[static_cast<std::size_t>(l - 1)];
  }
  return areas;
}

/// Random mask with blobby structure: a few filled rectangles plus salt noise.
inline appledefect::BinaryMask random_mask(appledefect::Rng& rng, int max_side = 64) {
  const int w = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_side)));
  const int h = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_side)));
  appledefect::BinaryMask m(w, h);
  const double density = rng.uniform(0.05, 0.6);
  for (auto& v : m.data) v = rng.uniform() < density ? 1 : 0;
  const int rects = static_cast<int>(rng.below(4));
  for (int r = 0; r < rects; ++r) {
    const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(w)));
    const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(h)));
    const int x1 = std::min(w - 1, x0 + static_cast<int>(rng.below(12)));
    const int y1 = std::min(h - 1, y0 + static_cast<int>(rng.below(12)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) m.set(x, y, true);
    }
  }
  return m;
}

}  // namespace oracle
