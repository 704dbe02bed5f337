#pragma once

// All-pairs correlation volume, its average-pooled pyramid and windowed
// bilinear lookup around the current flow estimate.

#include <cmath>
#include <cstddef>
#include <vector>

#include "gma/core.hpp"

namespace gma {

// One pyramid level: for every source pixel (H x W) a target grid of
// target_h x target_w correlations.
struct CorrVolume {
  std::size_t height = 0, width = 0;
  std::size_t target_h = 0, target_w = 0;
  std::vector<double> data;

  CorrVolume() = default;
  CorrVolume(std::size_t h, std::size_t w, std::size_t th, std::size_t tw)
      : height(h), width(w), target_h(th), target_w(tw), data(h * w * th * tw, 0.0) {}

  std::size_t target_size() const { return target_h * target_w; }

  double& at(std::size_t src, std::size_t ty, std::size_t tx) {
    return data[src * target_size() + ty * target_w + tx];
  }
  double at(std::size_t src, std::size_t ty, std::size_t tx) const {
    return data[src * target_size() + ty * target_w + tx];
  }

  // Bilinear sample of one source pixel's target grid; zero outside.
  double sample(std::size_t src, double y, double x) const {
    if (!(std::abs(y) < 1e15 && std::abs(x) < 1e15)) return 0.0;
    const double fy = std::floor(y), fx = std::floor(x);
    const double wy = y - fy, wx = x - fx;
    const auto y0 = static_cast<long long>(fy), x0 = static_cast<long long>(fx);
    auto tap = [&](long long yy, long long xx) -> double {
      if (yy < 0 || xx < 0 || yy >= static_cast<long long>(target_h) || xx >= static_cast<long long>(target_w)) {
        return 0.0;
      }
      return at(src, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
    };
    double s = 0.0;
    if (wy < 1.0 && wx < 1.0) s += (1.0 - wy) * (1.0 - wx) * tap(y0, x0);
    if (wy < 1.0 && wx > 0.0) s += (1.0 - wy) * wx * tap(y0, x0 + 1);
    if (wy > 0.0 && wx < 1.0) s += wy * (1.0 - wx) * tap(y0 + 1, x0);
    if (wy > 0.0 && wx > 0.0) s += wy * wx * tap(y0 + 1, x0 + 1);
    return s;
  }
};

struct CorrPyramid {
  std::vector<CorrVolume> levels;
  std::size_t num_levels() const { return levels.size(); }
};

// Entry (i, j) = <F1_i, F2_j> / sqrt(D).
inline CorrVolume all_pairs_correlation(const FeatureMap& f1, const FeatureMap& f2) {
  detail::require(f1.height == f2.height && f1.width == f2.width && f1.channels == f2.channels,
                  "all_pairs_correlation: feature maps differ in shape (", f1.height, "x", f1.width, "x",
                  f1.channels, " vs ", f2.height, "x", f2.width, "x", f2.channels, ")");
  detail::require(f1.channels >= 1, "all_pairs_correlation: zero channels");
  const Matrix dots = matmul_nt(flatten_hw(f1), flatten_hw(f2));
  const double scale = 1.0 / std::sqrt(static_cast<double>(f1.channels));
  CorrVolume vol(f1.height, f1.width, f2.height, f2.width);
  for (std::size_t t = 0; t < dots.data.size(); ++t) vol.data[t] = dots.data[t] * scale;
  return vol;
}

// 2x2 mean over the target dimensions.
inline CorrVolume pool_targets(const CorrVolume& in) {
  detail::require(in.target_h % 2 == 0 && in.target_w % 2 == 0, "pool_targets: odd target grid ",
                  in.target_h, "x", in.target_w);
  CorrVolume out(in.height, in.width, in.target_h / 2, in.target_w / 2);
  const std::size_t n = in.height * in.width;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t y = 0; y < out.target_h; ++y) {
      for (std::size_t x = 0; x < out.target_w; ++x) {
        out.at(s, y, x) = 0.25 * (in.at(s, 2 * y, 2 * x) + in.at(s, 2 * y, 2 * x + 1) +
                                  in.at(s, 2 * y + 1, 2 * x) + in.at(s, 2 * y + 1, 2 * x + 1));
      }
    }
  }
  return out;
}

inline CorrPyramid build_pyramid(CorrVolume vol, std::size_t num_levels) {
  detail::require(num_levels >= 1, "build_pyramid: need at least one level");
  const std::size_t div = std::size_t{1} << (num_levels - 1);
  detail::require(vol.target_h % div == 0 && vol.target_w % div == 0, "build_pyramid: target grid ",
                  vol.target_h, "x", vol.target_w, " not divisible by ", div, " for ", num_levels, " levels");
  CorrPyramid pyr;
  pyr.levels.reserve(num_levels);
  pyr.levels.push_back(std::move(vol));
  for (std::size_t l = 1; l < num_levels; ++l) pyr.levels.push_back(pool_targets(pyr.levels.back()));
  return pyr;
}

inline std::size_t lookup_channels(std::size_t num_levels, std::size_t radius) {
  return num_levels * (2 * radius + 1) * (2 * radius + 1);
}

// For each pixel and level, samples the (2r+1)^2 window centred on
// (pixel + flow) / 2^level. Channels: level-major, then window row-major
// (vertical offset outer, horizontal inner).
inline FeatureMap lookup(const CorrPyramid& pyr, const FlowField& flow, std::size_t radius) {
  detail::require(pyr.num_levels() >= 1, "lookup: empty pyramid");
  const auto& base = pyr.levels.front();
  detail::require(flow.height == base.height && flow.width == base.width, "lookup: flow is ", flow.height,
                  "x", flow.width, " but pyramid is ", base.height, "x", base.width);
  const std::size_t win = 2 * radius + 1;
  const auto r = static_cast<long long>(radius);
  FeatureMap out(base.height, base.width, lookup_channels(pyr.num_levels(), radius));
  for (std::size_t row = 0; row < base.height; ++row) {
    for (std::size_t col = 0; col < base.width; ++col) {
      const std::size_t src = flow.index(row, col);
      auto px = out.pixel(row, col);
      for (std::size_t l = 0; l < pyr.num_levels(); ++l) {
        const double inv = 1.0 / static_cast<double>(std::size_t{1} << l);
        const double cy = (static_cast<double>(row) + flow.v[src]) * inv;
        const double cx = (static_cast<double>(col) + flow.u[src]) * inv;
        std::size_t ch = l * win * win;
        for (long long dy = -r; dy <= r; ++dy) {
          for (long long dx = -r; dx <= r; ++dx) {
            px[ch++] = pyr.levels[l].sample(src, cy + static_cast<double>(dy), cx + static_cast<double>(dx));
          }
        }
      }
    }
  }
  return out;
}

}  // namespace gma
