#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "regionlets/layers.hpp"
#include "regionlets/tensor.hpp"

namespace regionlets {

// ---- soft regionlet selector -------------------------------------------------

enum class GateGranularity {
  per_element,    // one gate per V value: C*H*W outputs
  per_regionlet,  // one gate per regionlet, shared by its channels: H*W outputs
};

GateGranularity parse_gate_granularity(std::string_view text);
std::string_view to_string(GateGranularity g);

struct GateConfig {
  bool enabled = true;
  GateGranularity granularity = GateGranularity::per_element;
};

std::size_t gate_output_count(std::size_t channels, std::size_t height, std::size_t width,
                              GateGranularity g);

/// Zero weights and zero bias, so every gate starts at sigmoid(0) = 1/2.
FcParams gate_init(std::size_t channels, std::size_t height, std::size_t width, GateGranularity g);

struct GateCache {
  Tensor input;  // V, [N, C*H*W]
  Tensor gates;  // [N, gate count]
  Shape value_shape;
  GateGranularity granularity = GateGranularity::per_element;

  bool empty() const { return gates.empty(); }
};

struct GateOutput {
  Tensor gated;  // same shape as V
  Tensor gates;
  GateCache cache;
};

/// gates = sigmoid(FC(flatten(V))), gated = V * gates.
/// `values` is [C, H, W] or a batch [N, C, H, W]; each row gets its own gates.
GateOutput gate_forward(const Tensor& values, const FcParams& params, GateGranularity g);

/// Both paths through V are included: the direct product and the gate input.
/// wrt_input has the shape of V; wrt_params = {d weights, d bias}.
LayerGradients gate_backward(const GateCache& cache, const Tensor& upstream, const FcParams& params);

// ---- regionlet pool ------------------------------------------------------------

enum class PoolMode { max, average };

PoolMode parse_pool_mode(std::string_view text);
std::string_view to_string(PoolMode mode);

struct PoolConfig {
  PoolMode mode = PoolMode::max;
  std::size_t out_h = 1;
  std::size_t out_w = 1;
};

struct PoolCache {
  Shape input_shape;
  PoolConfig cfg;
  std::vector<std::size_t> argmax;  // flat input index per output element (max mode)

  bool empty() const { return input_shape.empty(); }
};

struct PoolOutput {
  Tensor pooled;
  PoolCache cache;
};

/// Non-overlapping windows over equal partitions of H x W. Max ties go to the
/// first element in row-major order. Accepts [C, H, W] or [N, C, H, W].
PoolOutput regionlet_pool_forward(const Tensor& values, const PoolConfig& cfg);
Tensor regionlet_pool_backward(const PoolCache& cache, const Tensor& upstream);

}  // namespace regionlets
