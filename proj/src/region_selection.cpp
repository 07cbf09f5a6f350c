#include "regionlets/region_selection.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "regionlets/config.hpp"

namespace regionlets {

RsnMode parse_rsn_mode(std::string_view text) {
  if (text == "full") return RsnMode::full;
  if (text == "offset-only") return RsnMode::offset_only;
  if (text == "global") return RsnMode::global;
  throw ConfigError("unknown RSN mode '" + std::string(text) + "' (full|offset-only|global)");
}

std::string_view to_string(RsnMode mode) {
  switch (mode) {
    case RsnMode::full: return "full";
    case RsnMode::offset_only: return "offset-only";
    case RsnMode::global: return "global";
  }
  return "?";
}

std::size_t RsnConfig::grid_side() const {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(num_regions))));
  if (num_regions == 0 || side * side != num_regions) {
    throw ConfigError("rsn.num_regions must be a positive perfect square, got " +
                      std::to_string(num_regions));
  }
  if (mode == RsnMode::global && num_regions != 1) {
    throw ConfigError("global RSN mode requires rsn.num_regions = 1");
  }
  return side;
}

AffineParams cell_init(std::size_t grid_n, std::size_t row, std::size_t col) {
  if (grid_n == 0 || row >= grid_n || col >= grid_n) {
    throw std::out_of_range("cell_init: cell (" + std::to_string(row) + "," + std::to_string(col) +
                            ") outside a " + std::to_string(grid_n) + "x" + std::to_string(grid_n) +
                            " grid");
  }
  const double n = static_cast<double>(grid_n);
  const double scale = 1.0 / n;
  return {{scale, 0.0, static_cast<double>(2 * col + 1) / n - 1.0,  //
           0.0, scale, static_cast<double>(2 * row + 1) / n - 1.0}};
}

std::array<double, 6> freeze_mask(RsnMode mode, std::size_t num_regions) {
  switch (mode) {
    case RsnMode::full: return {1, 1, 1, 1, 1, 1};
    case RsnMode::offset_only: return {0, 0, 1, 0, 0, 1};
    case RsnMode::global:
      if (num_regions != 1) throw ConfigError("global RSN mode requires exactly one region");
      return {1, 1, 1, 1, 1, 1};
  }
  throw ConfigError("unknown RSN mode");
}

RegionOfInterest clamp_to_feature_cell(const RegionOfInterest& roi, double stride) {
  RegionOfInterest r = roi;
  if (r.width < stride) {
    r.x0 += 0.5 * (r.width - stride);
    r.width = stride;
  }
  if (r.height < stride) {
    r.y0 += 0.5 * (r.height - stride);
    r.height = stride;
  }
  return r;
}

RoiSummary summarize_roi(const Tensor& feature_map, const RegionOfInterest& roi, double stride,
                         std::size_t summary_grid) {
  SampleGrid grid = grid_generate(AffineParams::identity(), clamp_to_feature_cell(roi, stride),
                                  summary_grid, summary_grid, stride);
  WarpedRegionlets w = warp_forward(feature_map, grid);
  return {w.values.reshaped({w.values.size()}), std::move(grid)};
}

RsnParams rsn_init(std::size_t input_size, const RsnConfig& cfg, SplitMix64& rng) {
  const std::size_t side = cfg.grid_side();
  auto he = [&](std::size_t fan_in, std::size_t fan_out) {
    Tensor w({fan_in, fan_out});
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w.values()) v = rng.normal(0.0, sd);
    return w;
  };
  RsnParams p;
  p.fc1 = {he(input_size, cfg.hidden), Tensor({cfg.hidden})};
  p.fc2 = {he(cfg.hidden, cfg.hidden), Tensor({cfg.hidden})};
  p.head = {Tensor({cfg.hidden, 6 * cfg.num_regions}), Tensor({6 * cfg.num_regions})};
  for (std::size_t k = 0; k < cfg.num_regions; ++k) {
    const AffineParams init =
        cfg.mode == RsnMode::global ? AffineParams::identity() : cell_init(side, k / side, k % side);
    std::copy(init.theta.begin(), init.theta.end(), p.head.bias.data() + 6 * k);
  }
  return p;
}

AffineParams RsnOutput::region(std::size_t row, std::size_t k) const {
  AffineParams a;
  const double* src = theta.data() + row * theta.dim(1) + 6 * k;
  std::copy(src, src + 6, a.theta.begin());
  return a;
}

RsnOutput rsn_forward(const Tensor& summary, const RsnParams& params) {
  RsnOutput out;
  RsnCache& c = out.cache;
  c.input = summary;
  c.pre1 = fc_forward(summary, params.fc1);
  c.act1 = relu_forward(c.pre1);
  c.pre2 = fc_forward(c.act1, params.fc2);
  c.act2 = relu_forward(c.pre2);
  c.raw = fc_forward(c.act2, params.head);
  require_finite(c.raw, "region selection network output");
  out.theta = c.raw;
  for (auto& v : out.theta.values()) v = std::clamp(v, -1.0, 1.0);
  return out;
}

LayerGradients rsn_backward(const RsnCache& cache, const Tensor& upstream, const RsnParams& params) {
  if (cache.empty()) throw std::invalid_argument("rsn_backward: missing forward cache");
  require_shape(upstream, cache.raw.shape(), "rsn_backward upstream");
  Tensor d_raw = upstream;
  for (std::size_t i = 0; i < d_raw.size(); ++i) {
    if (std::abs(cache.raw[i]) > 1.0) d_raw[i] = 0.0;
  }
  LayerGradients head = fc_backward(cache.act2, params.head.weights, d_raw);
  LayerGradients fc2 =
      fc_backward(cache.act1, params.fc2.weights, relu_backward(cache.pre2, head.wrt_input));
  LayerGradients fc1 =
      fc_backward(cache.input, params.fc1.weights, relu_backward(cache.pre1, fc2.wrt_input));
  return {std::move(fc1.wrt_input),
          {std::move(fc1.wrt_params[0]), std::move(fc1.wrt_params[1]), std::move(fc2.wrt_params[0]),
           std::move(fc2.wrt_params[1]), std::move(head.wrt_params[0]),
           std::move(head.wrt_params[1])}};
}

}  // namespace regionlets
