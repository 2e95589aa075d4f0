// SPDX-License-Identifier: Apache-2.0
#include "appledefect/registration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <json.hpp>

#include "appledefect/error.hpp"
#include "appledefect/rng.hpp"

namespace appledefect {

namespace {

Eigen::Matrix3d normalize_scale(Eigen::Matrix3d h) {
  if (std::abs(h(2, 2)) > 1e-12 * h.norm()) h /= h(2, 2);
  return h;
}

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
Eigen::Matrix3d hartley_transform(std::span<const Correspondence> corrs, bool use_src) {
  double mx = 0.0, my = 0.0;
  for (const auto& c : corrs) {
    const auto& p = use_src ? c.src : c.dst;
    mx += p.x;
    my += p.y;
  }
  mx /= static_cast<double>(corrs.size());
  my /= static_cast<double>(corrs.size());
  double mean_dist = 0.0;
  for (const auto& c : corrs) {
    const auto& p = use_src ? c.src : c.dst;
    mean_dist += std::hypot(p.x - mx, p.y - my);
  }
  mean_dist /= static_cast<double>(corrs.size());
  if (!(mean_dist > 1e-12)) throw Error(ErrorCode::DegenerateConfiguration, "all points coincide");
  const double s = std::numbers::sqrt2 / mean_dist;
  Eigen::Matrix3d t;
  t << s, 0, -s * mx, 0, s, -s * my, 0, 0, 1;
  return t;
}

bool collinear(const Point2& a, const Point2& b, const Point2& c, double scale) {
  const double cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
  return std::abs(cross) <= 1e-9 * std::max(scale * scale, 1.0);
}

bool has_collinear_triple(std::span<const Correspondence> corrs) {
  double scale = 0.0;
  for (const auto& c : corrs) {
    scale = std::max({scale, std::abs(c.src.x), std::abs(c.src.y), std::abs(c.dst.x), std::abs(c.dst.y)});
  }
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    for (std::size_t j = i + 1; j < corrs.size(); ++j) {
      for (std::size_t k = j + 1; k < corrs.size(); ++k) {
        if (collinear(corrs[i].src, corrs[j].src, corrs[k].src, scale) ||
            collinear(corrs[i].dst, corrs[j].dst, corrs[k].dst, scale)) {
          return true;
        }
      }
    }
  }
  return false;
}

void check_nonsingular(const Eigen::Matrix3d& h) {
  const double det = h.determinant();
  if (!std::isfinite(det) || std::abs(det) <= 1e-12 * std::pow(h.norm(), 3)) {
    throw Error(ErrorCode::DegenerateConfiguration, "estimated transform is singular");
  }
}

}  // namespace

Homography::Homography(const Eigen::Matrix3d& h) : h_(normalize_scale(h)) {}

Homography Homography::translation(double dx, double dy) {
  Eigen::Matrix3d h = Eigen::Matrix3d::Identity();
  h(0, 2) = dx;
  h(1, 2) = dy;
  return Homography(h);
}

Homography Homography::similarity(double cx, double cy, double rotation_deg, double scale, double dx, double dy) {
  const double t = rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(t) * scale, s = std::sin(t) * scale;
  Eigen::Matrix3d h;
  h << c, -s, cx - c * cx + s * cy + dx, s, c, cy - s * cx - c * cy + dy, 0, 0, 1;
  return Homography(h);
}

Point2 Homography::apply(Point2 p) const {
  const Eigen::Vector3d q = h_ * Eigen::Vector3d(p.x, p.y, 1.0);
  return {q.x() / q.z(), q.y() / q.z()};
}

Homography Homography::inverse() const {
  const double det = h_.determinant();
  if (!std::isfinite(det) || std::abs(det) <= 1e-12 * std::pow(h_.norm(), 3)) {
    throw Error(ErrorCode::SingularHomography, "homography is not invertible");
  }
  return Homography(h_.inverse());
}

double reprojection_error(const Homography& h, const Correspondence& c) {
  const Eigen::Vector3d q = h.matrix() * Eigen::Vector3d(c.src.x, c.src.y, 1.0);
  if (std::abs(q.z()) < 1e-15) return std::numeric_limits<double>::infinity();
  return std::hypot(q.x() / q.z() - c.dst.x, q.y() / q.z() - c.dst.y);
}

Homography estimate_homography_dlt(std::span<const Correspondence> corrs) {
  if (corrs.size() < 4) {
    throw Error(ErrorCode::InsufficientCorrespondences,
                "need at least 4 correspondences, got " + std::to_string(corrs.size()));
  }
  if (corrs.size() == 4 && has_collinear_triple(corrs)) {
    throw Error(ErrorCode::DegenerateConfiguration, "three of the four points are collinear");
  }
  const Eigen::Matrix3d ts = hartley_transform(corrs, true);
  const Eigen::Matrix3d td = hartley_transform(corrs, false);

  const auto n = static_cast<Eigen::Index>(corrs.size());
  Eigen::MatrixXd a(2 * n, 9);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& c = corrs[static_cast<std::size_t>(i)];
    const Eigen::Vector3d s = ts * Eigen::Vector3d(c.src.x, c.src.y, 1.0);
    const Eigen::Vector3d d = td * Eigen::Vector3d(c.dst.x, c.dst.y, 1.0);
    const double x = s.x(), y = s.y(), u = d.x(), v = d.y();
    a.row(2 * i) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    a.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv.size() < 8 || sv(7) <= 1e-10 * sv(0)) {
    throw Error(ErrorCode::DegenerateConfiguration, "design matrix is rank deficient");
  }
  const Eigen::VectorXd hv = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << hv(0), hv(1), hv(2), hv(3), hv(4), hv(5), hv(6), hv(7), hv(8);
  const Eigen::Matrix3d h = td.inverse() * hn * ts;
  check_nonsingular(h);
  return Homography(h);
}

Homography estimate_affine(std::span<const Correspondence> corrs) {
  if (corrs.size() < 3) {
    throw Error(ErrorCode::InsufficientCorrespondences,
                "affine fit needs at least 3 correspondences, got " + std::to_string(corrs.size()));
  }
  const Eigen::Matrix3d ts = hartley_transform(corrs, true);
  const Eigen::Matrix3d td = hartley_transform(corrs, false);
  const auto n = static_cast<Eigen::Index>(corrs.size());
  Eigen::MatrixXd a(n, 3);
  Eigen::MatrixXd b(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& c = corrs[static_cast<std::size_t>(i)];
    const Eigen::Vector3d s = ts * Eigen::Vector3d(c.src.x, c.src.y, 1.0);
    const Eigen::Vector3d d = td * Eigen::Vector3d(c.dst.x, c.dst.y, 1.0);
    a.row(i) << s.x(), s.y(), 1.0;
    b.row(i) << d.x(), d.y();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv(2) <= 1e-10 * sv(0)) throw Error(ErrorCode::DegenerateConfiguration, "points are collinear");
  const Eigen::MatrixXd x = svd.solve(b);  // 3x2
  Eigen::Matrix3d hn = Eigen::Matrix3d::Identity();
  hn.block<2, 3>(0, 0) = x.transpose();
  const Eigen::Matrix3d h = td.inverse() * hn * ts;
  check_nonsingular(h);
  return Homography(h);
}

RansacResult ransac_homography(std::span<const Correspondence> corrs, double inlier_threshold_px, int max_iterations,
                               std::uint64_t seed, TransformFamily family) {
  const std::size_t sample_size = family == TransformFamily::homography ? 4 : 3;
  if (corrs.size() < 4) {
    throw Error(ErrorCode::InsufficientCorrespondences,
                "need at least 4 correspondences, got " + std::to_string(corrs.size()));
  }
  if (!(inlier_threshold_px > 0.0)) throw Error(ErrorCode::ConfigError, "inlier threshold must be positive");

  auto fit = [&](std::span<const Correspondence> pts) {
    return family == TransformFamily::homography ? estimate_homography_dlt(pts) : estimate_affine(pts);
  };
  auto consensus = [&](const Homography& h) {
    std::vector<std::size_t> in;
    for (std::size_t i = 0; i < corrs.size(); ++i) {
      if (reprojection_error(h, corrs[i]) <= inlier_threshold_px) in.push_back(i);
    }
    return in;
  };
  auto gather = [&](const std::vector<std::size_t>& idx) {
    std::vector<Correspondence> pts;
    pts.reserve(idx.size());
    for (auto i : idx) pts.push_back(corrs[i]);
    return pts;
  };

  Rng rng(seed);
  std::vector<std::size_t> order(corrs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  Homography best_model;
  std::vector<std::size_t> best;
  double needed = max_iterations;
  constexpr double kConfidence = 0.999;

  for (int it = 0; it < max_iterations && it < needed; ++it) {
    // Partial Fisher-Yates draws a minimal sample without replacement.
    for (std::size_t k = 0; k < sample_size; ++k) {
      const auto j = k + static_cast<std::size_t>(rng.below(order.size() - k));
      std::swap(order[k], order[j]);
    }
    std::vector<Correspondence> sample;
    for (std::size_t k = 0; k < sample_size; ++k) sample.push_back(corrs[order[k]]);
    if (has_collinear_triple(sample)) continue;

    Homography h;
    try {
      h = fit(sample);
    } catch (const Error&) {
      continue;
    }
    auto in = consensus(h);
    if (in.size() > best.size()) {
      best = std::move(in);
      best_model = h;
      const double w = static_cast<double>(best.size()) / static_cast<double>(corrs.size());
      const double p_good = std::pow(w, static_cast<double>(sample_size));
      if (p_good >= 1.0) {
        needed = 0;
      } else if (p_good > 0.0) {
        needed = std::log(1.0 - kConfidence) / std::log(1.0 - p_good);
      }
    }
  }
  if (best.size() < 4) throw Error(ErrorCode::NoModelFound, "no sample reached a consensus of 4 inliers");

  // Re-fit on the consensus set until it stops growing; the returned set is
  // always the consensus of the returned model.
  for (int round = 0; round < 10; ++round) {
    Homography refit;
    try {
      refit = fit(gather(best));
    } catch (const Error&) {
      break;
    }
    auto in = consensus(refit);
    if (in.size() < best.size()) break;
    const bool same = in == best;
    best = std::move(in);
    best_model = refit;
    if (same) break;
  }
  return {best_model, best};
}

template <typename T>
Raster<T> warp_and_crop(const Raster<T>& image, const Homography& h, int out_width, int out_height) {
  const Eigen::Matrix3d inv = h.inverse().matrix();
  Raster<T> out(out_width, out_height, image.channels);
  const int ox = (image.width - out_width) / 2;
  const int oy = (image.height - out_height) / 2;
  const double max_x = image.width - 1.0, max_y = image.height - 1.0;
  constexpr double eps = 1e-9;
  for (int v = 0; v < out_height; ++v) {
    for (int u = 0; u < out_width; ++u) {
      const double cx = u + ox, cy = v + oy;
      const double w = inv(2, 0) * cx + inv(2, 1) * cy + inv(2, 2);
      const double sx = (inv(0, 0) * cx + inv(0, 1) * cy + inv(0, 2)) / w;
      const double sy = (inv(1, 0) * cx + inv(1, 1) * cy + inv(1, 2)) / w;
      if (!(sx >= -eps && sx <= max_x + eps && sy >= -eps && sy <= max_y + eps)) continue;
      const double fx = std::clamp(sx, 0.0, max_x), fy = std::clamp(sy, 0.0, max_y);
      const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
      const int x1 = std::min(x0 + 1, image.width - 1), y1 = std::min(y0 + 1, image.height - 1);
      const double wx = fx - x0, wy = fy - y0;
      for (int c = 0; c < image.channels; ++c) {
        const double top = image.at(x0, y0, c) * (1 - wx) + image.at(x1, y0, c) * wx;
        const double bot = image.at(x0, y1, c) * (1 - wx) + image.at(x1, y1, c) * wx;
        const double val = top * (1 - wy) + bot * wy;
        if constexpr (std::is_integral_v<T>) {
          out.at(u, v, c) = static_cast<T>(std::clamp<long>(std::lround(val), std::numeric_limits<T>::min(),
                                                            std::numeric_limits<T>::max()));
        } else {
          out.at(u, v, c) = static_cast<T>(val);
        }
      }
    }
  }
  return out;
}

template Raster<std::uint8_t> warp_and_crop(const Raster<std::uint8_t>&, const Homography&, int, int);
template Raster<double> warp_and_crop(const Raster<double>&, const Homography&, int, int);

namespace {

/// Summed-area table with one row/column of zero padding.
struct Integral {
  int w, h;
  std::vector<double> sum, sq;

  explicit Integral(const ImageF& img) : w(img.width), h(img.height) {
    sum.assign(static_cast<std::size_t>(w + 1) * (h + 1), 0.0);
    sq.assign(sum.size(), 0.0);
    for (int y = 0; y < h; ++y) {
      double row = 0.0, row_sq = 0.0;
      for (int x = 0; x < w; ++x) {
        const double v = img.at(x, y);
        row += v;
        row_sq += v * v;
        sum[idx(x + 1, y + 1)] = sum[idx(x + 1, y)] + row;
        sq[idx(x + 1, y + 1)] = sq[idx(x + 1, y)] + row_sq;
      }
    }
  }
  std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * (w + 1) + x; }
  double box(const std::vector<double>& t, int x, int y, int size) const {
    return t[idx(x + size, y + size)] - t[idx(x, y + size)] - t[idx(x + size, y)] + t[idx(x, y)];
  }
};

}  // namespace

std::vector<Correspondence> match_ncc_grid(const ImageF& moving, const ImageF& fixed, const MatcherConfig& cfg) {
  std::vector<Correspondence> out;
  const int p = cfg.patch;
  if (fixed.width < p || fixed.height < p || moving.width < p || moving.height < p) return out;
  const Integral mi(moving);
  const double n = static_cast<double>(p) * p;
  std::vector<double> tmpl(static_cast<std::size_t>(p) * p);

  for (int gy = 0; gy < cfg.grid; ++gy) {
    for (int gx = 0; gx < cfg.grid; ++gx) {
      const double ccx = (gx + 0.5) * fixed.width / cfg.grid;
      const double ccy = (gy + 0.5) * fixed.height / cfg.grid;
      const int px = std::clamp(static_cast<int>(std::lround(ccx - p / 2.0)), 0, fixed.width - p);
      const int py = std::clamp(static_cast<int>(std::lround(ccy - p / 2.0)), 0, fixed.height - p);

      double mean = 0.0;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x) mean += fixed.at(px + x, py + y);
      mean /= n;
      double energy = 0.0;
      for (int y = 0; y < p; ++y) {
        for (int x = 0; x < p; ++x) {
          const double d = fixed.at(px + x, py + y) - mean;
          tmpl[static_cast<std::size_t>(y) * p + x] = d;
          energy += d * d;
        }
      }
      if (energy / n < 1e-6) continue;  // flat patch: no texture to lock onto
      const double tnorm = std::sqrt(energy);

      const int side = 2 * cfg.search + 1;
      std::vector<double> score(static_cast<std::size_t>(side) * side, -2.0);
      double best = -2.0;
      int bx = 0, by = 0;
      for (int dy = -cfg.search; dy <= cfg.search; ++dy) {
        const int my = py + dy;
        if (my < 0 || my + p > moving.height) continue;
        for (int dx = -cfg.search; dx <= cfg.search; ++dx) {
          const int mx = px + dx;
          if (mx < 0 || mx + p > moving.width) continue;
          const double s = mi.box(mi.sum, mx, my, p);
          const double var = mi.box(mi.sq, mx, my, p) - s * s / n;
          if (var / n < 1e-6) continue;
          double dot = 0.0;
          for (int y = 0; y < p; ++y) {
            const double* mrow = &moving.data[moving.index(mx, my + y)];
            const double* trow = &tmpl[static_cast<std::size_t>(y) * p];
            for (int x = 0; x < p; ++x) dot += trow[x] * mrow[x];
          }
          const double ncc = dot / (tnorm * std::sqrt(var));
          score[static_cast<std::size_t>(dy + cfg.search) * side + (dx + cfg.search)] = ncc;
          if (ncc > best) {
            best = ncc;
            bx = dx;
            by = dy;
          }
        }
      }
      if (best >= cfg.min_ncc) {
        auto at = [&](int dx, int dy) {
          if (std::abs(dx) > cfg.search || std::abs(dy) > cfg.search) return -2.0;
          return score[static_cast<std::size_t>(dy + cfg.search) * side + (dx + cfg.search)];
        };
        // Parabola through the peak and its two neighbours along each axis.
        auto vertex = [](double a, double b, double c) {
          if (a < -1.5 || c < -1.5) return 0.0;
          const double denom = a - 2.0 * b + c;
          return denom < 0.0 ? std::clamp(0.5 * (a - c) / denom, -0.5, 0.5) : 0.0;
        };
        const double sx = vertex(at(bx - 1, by), best, at(bx + 1, by));
        const double sy = vertex(at(bx, by - 1), best, at(bx, by + 1));
        const double half = (p - 1) / 2.0;
        out.push_back({{px + bx + sx + half, py + by + sy + half}, {px + half, py + half}});
      }
    }
  }
  return out;
}

RegistrationResult register_pair(const Image& moving, const Image& fixed, const MatcherConfig& cfg,
                                 std::optional<std::span<const Correspondence>> external) {
  std::vector<Correspondence> corrs;
  if (external) {
    corrs.assign(external->begin(), external->end());
  } else {
    corrs = match_ncc_grid(to_luma(moving), to_luma(fixed), cfg);
  }
  if (corrs.size() < 4) {
    throw Error(ErrorCode::MatchFailure,
                "only " + std::to_string(corrs.size()) + " matches above NCC " + std::to_string(cfg.min_ncc));
  }
  auto fit = ransac_homography(corrs, cfg.ransac_threshold, cfg.ransac_iterations, cfg.seed, cfg.family);
  if (!external) {
    // Re-match on the moving image pre-warped by the current estimate, map back, refit.
    const ImageF moving_luma = to_luma(moving), fixed_luma = to_luma(fixed);
    MatcherConfig fine = cfg;
    fine.search = std::min(cfg.search, kRefineSearch);
    for (int pass = 0; pass < cfg.refine_passes; ++pass) {
      const Homography inv = fit.model.inverse();
      auto refined = match_ncc_grid(warp_and_crop(moving_luma, fit.model, moving.width, moving.height), fixed_luma, fine);
      for (auto& c : refined) c.src = inv.apply(c.src);
      if (refined.size() < 4) break;
      try {
        auto next = ransac_homography(refined, cfg.ransac_threshold, cfg.ransac_iterations, cfg.seed, cfg.family);
        corrs = std::move(refined);
        fit = std::move(next);
      } catch (const Error&) {
        break;
      }
    }
  }
  RegistrationResult r;
  r.h = fit.model;
  r.diagnostics.matches = corrs.size();
  r.diagnostics.inliers = fit.inliers.size();
  double total = 0.0;
  for (auto i : fit.inliers) total += reprojection_error(fit.model, corrs[i]);
  r.diagnostics.mean_residual = fit.inliers.empty() ? 0.0 : total / static_cast<double>(fit.inliers.size());
  r.registered = warp_and_crop(moving, fit.model, cfg.out_width, cfg.out_height);
  return r;
}

std::vector<Correspondence> load_correspondences(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read correspondence file " + path.string());
  std::vector<Correspondence> out;
  try {
    const auto doc = nlohmann::json::parse(in);
    for (const auto& e : doc) {
      out.push_back({{e.at("src").at(0).get<double>(), e.at("src").at(1).get<double>()},
                     {e.at("dst").at(0).get<double>(), e.at("dst").at(1).get<double>()}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IoError, path.string() + ": " + e.what());
  }
  return out;
}

void save_correspondences(const std::filesystem::path& path, std::span<const Correspondence> corrs) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& c : corrs) doc.push_back({{"src", {c.src.x, c.src.y}}, {"dst", {c.dst.x, c.dst.y}}});
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::OutputNotWritable, path.string());
  out << doc.dump(2) << "\n";
}

}  // namespace appledefect
