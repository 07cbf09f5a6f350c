#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "regionlets/geometry.hpp"
#include "regionlets/layers.hpp"
#include "regionlets/rng.hpp"
#include "regionlets/tensor.hpp"
#include "regionlets/warp.hpp"

namespace regionlets {

/// Which affine components the region selection network may learn.
///   full        - all six, K cell-initialised regions
///   offset_only - only the translations t3, t6; the scales stay at their cell values
///   global      - one region initialised to the identity, all six learnable
enum class RsnMode { full, offset_only, global };

RsnMode parse_rsn_mode(std::string_view text);
std::string_view to_string(RsnMode mode);

struct RsnConfig {
  std::size_t num_regions = 16;  // must be a perfect square
  std::size_t hidden = 256;
  std::size_t summary_grid = 4;
  RsnMode mode = RsnMode::full;

  /// sqrt(num_regions); throws if num_regions is not a perfect square, or if
  /// the global mode is combined with more than one region.
  std::size_t grid_side() const;
};

/// Affine parameters of cell (row, col) of an n x n partition of the box.
/// y grows downward, so the top-left cell has t6 = -(n-1)/n.
AffineParams cell_init(std::size_t grid_n, std::size_t row, std::size_t col);

/// 0/1 mask over the six affine gradients.
std::array<double, 6> freeze_mask(RsnMode mode, std::size_t num_regions);

/// Feature-map window of `roi` resampled to S x S (identity warp) and flattened to C*S*S.
struct RoiSummary {
  Tensor values;  // [C * S * S]
  SampleGrid grid;
};

/// Clamps RoIs smaller than one feature cell up to one cell about their centre.
RegionOfInterest clamp_to_feature_cell(const RegionOfInterest& roi, double stride);

RoiSummary summarize_roi(const Tensor& feature_map, const RegionOfInterest& roi, double stride,
                         std::size_t summary_grid);

struct RsnParams {
  FcParams fc1;   // [C*S*S, hidden]
  FcParams fc2;   // [hidden, hidden]
  FcParams head;  // [hidden, 6K]; K heads packed side by side
};

/// He-normal trunk, zero head weights, head biases at the cell (or identity) grid.
RsnParams rsn_init(std::size_t input_size, const RsnConfig& cfg, SplitMix64& rng);

struct RsnCache {
  Tensor input;
  Tensor pre1, act1;
  Tensor pre2, act2;
  Tensor raw;  // [N, 6K] before clamping

  bool empty() const { return raw.empty(); }
};

struct RsnOutput {
  Tensor theta;  // [N, 6K] clamped to [-1, 1]
  RsnCache cache;

  AffineParams region(std::size_t row, std::size_t k) const;
};

/// summary [N, C*S*S] -> K affine sextuples per row.
RsnOutput rsn_forward(const Tensor& summary, const RsnParams& params);

/// upstream [N, 6K] = dL/dtheta. Components with |raw| > 1 receive zero gradient.
/// wrt_params = {fc1.w, fc1.b, fc2.w, fc2.b, head.w, head.b}.
LayerGradients rsn_backward(const RsnCache& cache, const Tensor& upstream, const RsnParams& params);

}  // namespace regionlets
