#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "regionlets/geometry.hpp"
#include "regionlets/tensor.hpp"

namespace regionlets {

/// Sample locations for one selected region.
///
/// Target coordinates are cell centres of an H x W lattice over [-1,1]^2.
/// Source coordinates live in feature-map pixel units where integer (m, n)
/// is the centre of feature cell (row n, column m).
struct SampleGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> target_x;  // [width]
  std::vector<double> target_y;  // [height]
  std::vector<double> source_x;  // [height * width], row-major
  std::vector<double> source_y;
  AffineParams theta;
  RegionOfInterest roi;
  double stride = 1.0;

  std::size_t points() const { return height * width; }
  /// d source_x / d normalized x.
  double x_scale() const { return roi.width / (2.0 * stride); }
  /// d source_y / d normalized y.
  double y_scale() const { return roi.height / (2.0 * stride); }
};

/// Maps the H x W target lattice through `theta` and then into the feature map:
///   x_n = t1 x_t + t2 y_t + t3,  y_n = t4 x_t + t5 y_t + t6
///   x_s = (x0 + (x_n + 1)/2 * w) / stride - 1/2   (and likewise for y)
SampleGrid grid_generate(const AffineParams& theta, const RegionOfInterest& roi, std::size_t height,
                         std::size_t width, double stride);

struct WarpedRegionlets {
  Tensor values;  // [C, H, W]
  SampleGrid grid;
};

/// Bilinear (hat-kernel) sampling of U [C, Hf, Wf] at every grid point.
/// Neighbours outside the map contribute zero.
WarpedRegionlets warp_forward(const Tensor& feature_map, const SampleGrid& grid);

/// Scatter of `upstream` [C, H, W] back onto the feature map: dL/dU.
Tensor warp_backward_input(const Tensor& upstream, const SampleGrid& grid, const Shape& map_shape);

/// Same as warp_backward_input but adds into an existing gradient buffer.
void warp_accumulate_input(const Tensor& upstream, const SampleGrid& grid, Tensor& grad_map);

/// dL/d theta_i for all six affine parameters.
std::array<double, 6> warp_backward_theta(const Tensor& upstream, const SampleGrid& grid,
                                          const Tensor& feature_map);

/// max(0, 1 - |d|)
inline double hat_kernel(double d) {
  const double a = d < 0.0 ? -d : d;
  return a < 1.0 ? 1.0 - a : 0.0;
}

/// d/dx of max(0, 1 - |x - m|): +1 if m > x, -1 if m < x, 0 at or beyond distance one
/// and at the lattice point itself.
inline double hat_kernel_slope(double x, double m) {
  const double d = m - x;
  if (d >= 1.0 || d <= -1.0 || d == 0.0) return 0.0;
  return d > 0.0 ? 1.0 : -1.0;
}

}  // namespace regionlets
