#pragma once

// Independent reference computations shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <set>
#include <utility>
#include <vector>

#include "regionlets/gating_pool.hpp"
#include "regionlets/region_selection.hpp"
#include "regionlets/rng.hpp"
#include "regionlets/warp.hpp"

namespace regionlets::oracle {

inline SampleGrid point_grid(double x, double y) {
  SampleGrid g;
  g.height = 1;
  g.width = 1;
  g.target_x = {0.0};
  g.target_y = {0.0};
  g.source_x = {x};
  g.source_y = {y};
  return g;
}

/// Bilinear sample with floor-based neighbour lookup, zero outside the map.
inline double bilinear(const Tensor& u, std::size_t c, double x, double y) {
  const long h = static_cast<long>(u.dim(1)), w = static_cast<long>(u.dim(2));
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  double acc = 0.0;
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      const long xi = static_cast<long>(fx) + dx, yi = static_cast<long>(fy) + dy;
      if (xi < 0 || yi < 0 || xi >= w || yi >= h) continue;
      const double wx = dx ? ax : 1.0 - ax, wy = dy ? ay : 1.0 - ay;
      acc += wx * wy * u(c, static_cast<std::size_t>(yi), static_cast<std::size_t>(xi));
    }
  }
  return acc;
}

/// Image-pixel sample positions, snapped to a 1e-6 lattice, of `regions` (row-major over
/// an n x n partition) with a density x density regionlet grid each.
inline std::vector<std::pair<long, long>> region_samples(const std::vector<AffineParams>& regions,
                                                         std::size_t density, const RegionOfInterest& roi,
                                                         double stride) {
  std::vector<std::pair<long, long>> pts;
  for (const auto& t : regions) {
    const SampleGrid g = grid_generate(t, roi, density, density, stride);
    for (std::size_t p = 0; p < g.points(); ++p) {
      pts.emplace_back(std::lround((g.source_x[p] + 0.5) * stride * 1e6),
                       std::lround((g.source_y[p] + 0.5) * stride * 1e6));
    }
  }
  return pts;
}

/// True when the samples are pairwise distinct and are exactly the centres of the
/// (n * density)^2 equal cells of the RoI: the regions neither overlap nor leave gaps.
inline bool tiles_roi(const std::vector<std::pair<long, long>>& pts, std::size_t side, const RegionOfInterest& roi) {
  const std::set<std::pair<long, long>> unique(pts.begin(), pts.end());
  if (unique.size() != pts.size()) return false;
  std::set<std::pair<long, long>> lattice;
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) {
      lattice.emplace(std::lround((roi.x0 + (j + 0.5) * roi.width / side) * 1e6),
                      std::lround((roi.y0 + (i + 0.5) * roi.height / side) * 1e6));
    }
  }
  return unique == lattice;
}

/// Largest deviation, over random instances, between an offset-only cell region followed by
/// whole-grid pooling and pooling over the correspondingly shifted rectangular bin
/// (bilinear samples at the bin's sub-cell centres).
inline double shifted_bin_pooling_gap(std::uint64_t seed, int trials) {
  SplitMix64 rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    const std::size_t n = 1 + rng.below(4), h = 1 + rng.below(4), w = 1 + rng.below(4);
    const double stride = 8.0;
    Tensor u({3, 8, 8});
    for (auto& v : u.values()) v = rng.uniform(-1.0, 1.0);
    const RegionOfInterest roi{rng.uniform(0, 24), rng.uniform(0, 24), rng.uniform(8, 40), rng.uniform(8, 40)};
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        AffineParams t = cell_init(n, r, c);
        const double shift_x = rng.uniform(-0.3, 0.3), shift_y = rng.uniform(-0.3, 0.3);
        t.theta[2] += shift_x;
        t.theta[5] += shift_y;
        const auto warped = warp_forward(u, grid_generate(t, roi, h, w, stride));
        const auto avg = regionlet_pool_forward(warped.values, {PoolMode::average, 1, 1});
        const auto mx = regionlet_pool_forward(warped.values, {PoolMode::max, 1, 1});
        const double bw = roi.width / n, bh = roi.height / n;
        const double bx = roi.x0 + c * bw + shift_x * roi.width / 2.0;
        const double by = roi.y0 + r * bh + shift_y * roi.height / 2.0;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          double sum = 0.0, best = -1e300;
          for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
              const double px = bx + (j + 0.5) * bw / w, py = by + (i + 0.5) * bh / h;
              const double s = bilinear(u, ch, px / stride - 0.5, py / stride - 0.5);
              sum += s;
              best = std::max(best, s);
            }
          }
          worst = std::max(worst, std::abs(avg.pooled[ch] - sum / static_cast<double>(h * w)));
          worst = std::max(worst, std::abs(mx.pooled[ch] - best));
        }
      }
    }
  }
  return worst;
}

}  // namespace regionlets::oracle
