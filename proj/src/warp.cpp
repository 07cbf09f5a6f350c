#include "regionlets/warp.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace regionlets {

SampleGrid grid_generate(const AffineParams& theta, const RegionOfInterest& roi, std::size_t height,
                         std::size_t width, double stride) {
  if (height == 0 || width == 0) throw std::invalid_argument("grid_generate: H and W must be >= 1");
  if (!(stride > 0.0)) throw std::invalid_argument("grid_generate: stride must be positive");
  SampleGrid g;
  g.height = height;
  g.width = width;
  g.theta = theta;
  g.roi = roi;
  g.stride = stride;
  g.target_x.resize(width);
  g.target_y.resize(height);
  for (std::size_t j = 0; j < width; ++j) {
    g.target_x[j] = -1.0 + static_cast<double>(2 * j + 1) / static_cast<double>(width);
  }
  for (std::size_t i = 0; i < height; ++i) {
    g.target_y[i] = -1.0 + static_cast<double>(2 * i + 1) / static_cast<double>(height);
  }
  const auto& t = theta.theta;
  g.source_x.resize(height * width);
  g.source_y.resize(height * width);
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      const double xt = g.target_x[j], yt = g.target_y[i];
      const double xn = t[0] * xt + t[1] * yt + t[2];
      const double yn = t[3] * xt + t[4] * yt + t[5];
      g.source_x[i * width + j] = (roi.x0 + (xn + 1.0) * 0.5 * roi.width) / stride - 0.5;
      g.source_y[i * width + j] = (roi.y0 + (yn + 1.0) * 0.5 * roi.height) / stride - 0.5;
    }
  }
  return g;
}

namespace {

// The (up to) four lattice neighbours of a sample point that lie inside the map.
struct Neighbours {
  int count = 0;
  std::size_t offset[4];  // n * Wf + m
  double wx[4];           // hat(x - m)
  double wy[4];           // hat(y - n)
  double sx[4];           // slope in x
  double sy[4];           // slope in y
};

Neighbours neighbours(double x, double y, std::size_t map_h, std::size_t map_w) {
  Neighbours nb;
  const double fx = std::floor(x), fy = std::floor(y);
  for (int dn = 0; dn < 2; ++dn) {
    const double n = fy + dn;
    if (n < 0.0 || n >= static_cast<double>(map_h)) continue;
    for (int dm = 0; dm < 2; ++dm) {
      const double m = fx + dm;
      if (m < 0.0 || m >= static_cast<double>(map_w)) continue;
      const int k = nb.count++;
      nb.offset[k] = static_cast<std::size_t>(n) * map_w + static_cast<std::size_t>(m);
      nb.wx[k] = hat_kernel(x - m);
      nb.wy[k] = hat_kernel(y - n);
      nb.sx[k] = hat_kernel_slope(x, m);
      nb.sy[k] = hat_kernel_slope(y, n);
    }
  }
  return nb;
}

void require_map(const Tensor& u, const char* what) {
  if (u.rank() != 3) {
    throw ShapeError(std::string(what) + ": feature map must be [C,H,W], got " +
                     shape_to_string(u.shape()));
  }
}

void require_grid_finite(const SampleGrid& grid) {
  for (std::size_t p = 0; p < grid.points(); ++p) {
    if (!std::isfinite(grid.source_x[p]) || !std::isfinite(grid.source_y[p])) {
      throw NumericError("warp: non-finite sample coordinate at grid point " + std::to_string(p));
    }
  }
}

}  // namespace

WarpedRegionlets warp_forward(const Tensor& feature_map, const SampleGrid& grid) {
  require_map(feature_map, "warp_forward");
  require_grid_finite(grid);
  const std::size_t channels = feature_map.dim(0), map_h = feature_map.dim(1),
                    map_w = feature_map.dim(2), plane = map_h * map_w, points = grid.points();
  Tensor out({channels, grid.height, grid.width});
  for (std::size_t p = 0; p < points; ++p) {
    const Neighbours nb = neighbours(grid.source_x[p], grid.source_y[p], map_h, map_w);
    for (int k = 0; k < nb.count; ++k) {
      const double w = nb.wx[k] * nb.wy[k];
      if (w == 0.0) continue;
      const double* u = feature_map.data() + nb.offset[k];
      for (std::size_t c = 0; c < channels; ++c) out.data()[c * points + p] += w * u[c * plane];
    }
  }
  return {std::move(out), grid};
}

void warp_accumulate_input(const Tensor& upstream, const SampleGrid& grid, Tensor& grad_map) {
  require_map(grad_map, "warp_backward_input");
  const std::size_t channels = grad_map.dim(0), map_h = grad_map.dim(1), map_w = grad_map.dim(2),
                    plane = map_h * map_w, points = grid.points();
  require_shape(upstream, {channels, grid.height, grid.width}, "warp_backward_input upstream");
  for (std::size_t p = 0; p < points; ++p) {
    const Neighbours nb = neighbours(grid.source_x[p], grid.source_y[p], map_h, map_w);
    for (int k = 0; k < nb.count; ++k) {
      const double w = nb.wx[k] * nb.wy[k];
      if (w == 0.0) continue;
      double* g = grad_map.data() + nb.offset[k];
      for (std::size_t c = 0; c < channels; ++c) g[c * plane] += w * upstream.data()[c * points + p];
    }
  }
}

Tensor warp_backward_input(const Tensor& upstream, const SampleGrid& grid, const Shape& map_shape) {
  Tensor grad(map_shape);
  warp_accumulate_input(upstream, grid, grad);
  return grad;
}

std::array<double, 6> warp_backward_theta(const Tensor& upstream, const SampleGrid& grid,
                                          const Tensor& feature_map) {
  require_map(feature_map, "warp_backward_theta");
  if (grid.points() == 0) throw std::invalid_argument("warp_backward_theta: empty sample grid");
  const std::size_t channels = feature_map.dim(0), map_h = feature_map.dim(1),
                    map_w = feature_map.dim(2), plane = map_h * map_w, points = grid.points();
  require_shape(upstream, {channels, grid.height, grid.width}, "warp_backward_theta upstream");
  std::array<double, 6> d{};
  const double sx_scale = grid.x_scale(), sy_scale = grid.y_scale();
  for (std::size_t i = 0; i < grid.height; ++i) {
    for (std::size_t j = 0; j < grid.width; ++j) {
      const std::size_t p = i * grid.width + j;
      const Neighbours nb = neighbours(grid.source_x[p], grid.source_y[p], map_h, map_w);
      // dL/dx_s and dL/dy_s summed over channels.
      double gx = 0.0, gy = 0.0;
      for (int k = 0; k < nb.count; ++k) {
        const double cx = nb.wy[k] * nb.sx[k];
        const double cy = nb.wx[k] * nb.sy[k];
        if (cx == 0.0 && cy == 0.0) continue;
        const double* u = feature_map.data() + nb.offset[k];
        double dot = 0.0;
        for (std::size_t c = 0; c < channels; ++c) dot += upstream.data()[c * points + p] * u[c * plane];
        gx += cx * dot;
        gy += cy * dot;
      }
      const double xt = grid.target_x[j], yt = grid.target_y[i];
      const double gxn = gx * sx_scale, gyn = gy * sy_scale;
      d[0] += gxn * xt;
      d[1] += gxn * yt;
      d[2] += gxn;
      d[3] += gyn * xt;
      d[4] += gyn * yt;
      d[5] += gyn;
    }
  }
  return d;
}

}  // namespace regionlets
