#pragma once

#include <array>

namespace regionlets {

/// Detection-window proposal in input-image pixels: top-left (x0, y0), width, height.
struct RegionOfInterest {
  double x0 = 0.0;
  double y0 = 0.0;
  double width = 1.0;
  double height = 1.0;

  friend bool operator==(const RegionOfInterest&, const RegionOfInterest&) = default;
};

/// Axis-aligned box in corner form (x1, y1, x2, y2), image pixels.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() > 0.0 && height() > 0.0 ? width() * height() : 0.0; }

  friend bool operator==(const Box&, const Box&) = default;
};

inline Box to_box(const RegionOfInterest& r) { return {r.x0, r.y0, r.x0 + r.width, r.y0 + r.height}; }
inline RegionOfInterest to_roi(const Box& b) { return {b.x1, b.y1, b.width(), b.height()}; }

/// Normalized affine transform [t1 t2 t3; t4 t5 t6] mapping target grid
/// coordinates in [-1,1]^2 to region-normalized source coordinates.
struct AffineParams {
  std::array<double, 6> theta{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};

  static AffineParams identity() { return {}; }

  friend bool operator==(const AffineParams&, const AffineParams&) = default;
};

}  // namespace regionlets
