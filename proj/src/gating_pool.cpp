#include "regionlets/gating_pool.hpp"

#include <stdexcept>

#include "regionlets/config.hpp"

namespace regionlets {

GateGranularity parse_gate_granularity(std::string_view text) {
  if (text == "per-element") return GateGranularity::per_element;
  if (text == "per-regionlet") return GateGranularity::per_regionlet;
  throw ConfigError("unknown gate granularity '" + std::string(text) +
                    "' (per-element|per-regionlet)");
}

std::string_view to_string(GateGranularity g) {
  return g == GateGranularity::per_element ? "per-element" : "per-regionlet";
}

std::size_t gate_output_count(std::size_t channels, std::size_t height, std::size_t width,
                              GateGranularity g) {
  return g == GateGranularity::per_element ? channels * height * width : height * width;
}

FcParams gate_init(std::size_t channels, std::size_t height, std::size_t width, GateGranularity g) {
  const std::size_t n_out = gate_output_count(channels, height, width, g);
  return {Tensor({channels * height * width, n_out}), Tensor({n_out})};
}

namespace {

// Splits [C,H,W] or [N,C,H,W] into (batch, C, H, W).
struct Dims4 {
  std::size_t n, c, h, w;
};

Dims4 split_dims(const Tensor& t, const char* what) {
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
  throw ShapeError(std::string(what) + ": expected [C,H,W] or [N,C,H,W], got " +
                   shape_to_string(t.shape()));
}

}  // namespace

GateOutput gate_forward(const Tensor& values, const FcParams& params, GateGranularity g) {
  const Dims4 d = split_dims(values, "gate_forward");
  const std::size_t per_row = d.c * d.h * d.w;
  const std::size_t n_gates = gate_output_count(d.c, d.h, d.w, g);
  if (params.weights.shape() != Shape{per_row, n_gates} || params.bias.shape() != Shape{n_gates}) {
    throw ShapeError("gate_forward: weights " + shape_to_string(params.weights.shape()) +
                     " do not map " + std::to_string(per_row) + " values to " +
                     std::to_string(n_gates) + " gates");
  }
  GateOutput out;
  out.cache.input = values.reshaped({d.n, per_row});
  out.cache.value_shape = values.shape();
  out.cache.granularity = g;
  out.gates = sigmoid_forward(fc_forward(out.cache.input, params));
  out.cache.gates = out.gates;
  out.gated = values;
  const std::size_t plane = d.h * d.w;
  for (std::size_t b = 0; b < d.n; ++b) {
    double* v = out.gated.data() + b * per_row;
    const double* gate = out.gates.data() + b * n_gates;
    for (std::size_t i = 0; i < per_row; ++i) {
      v[i] *= g == GateGranularity::per_element ? gate[i] : gate[i % plane];
    }
  }
  return out;
}

LayerGradients gate_backward(const GateCache& cache, const Tensor& upstream, const FcParams& params) {
  if (cache.empty()) throw std::invalid_argument("gate_backward: missing forward cache");
  require_shape(upstream, cache.value_shape, "gate_backward upstream");
  const std::size_t n = cache.input.dim(0), per_row = cache.input.dim(1);
  const std::size_t n_gates = cache.gates.dim(1);
  const std::size_t plane = cache.granularity == GateGranularity::per_element ? per_row : n_gates;

  // d gated / d V through the product, and dL/dgates.
  Tensor d_values({n, per_row});
  Tensor d_gates({n, n_gates});
  for (std::size_t b = 0; b < n; ++b) {
    const double* up = upstream.data() + b * per_row;
    const double* v = cache.input.data() + b * per_row;
    const double* gate = cache.gates.data() + b * n_gates;
    double* dv = d_values.data() + b * per_row;
    double* dg = d_gates.data() + b * n_gates;
    for (std::size_t i = 0; i < per_row; ++i) {
      const std::size_t gi = i % plane;
      dv[i] = up[i] * gate[gi];
      dg[gi] += up[i] * v[i];
    }
  }
  LayerGradients fc = fc_backward(cache.input, params.weights, sigmoid_backward(cache.gates, d_gates));
  for (std::size_t i = 0; i < d_values.size(); ++i) d_values[i] += fc.wrt_input[i];
  return {d_values.reshaped(cache.value_shape), std::move(fc.wrt_params)};
}

PoolMode parse_pool_mode(std::string_view text) {
  if (text == "max") return PoolMode::max;
  if (text == "average" || text == "ave" || text == "avg") return PoolMode::average;
  throw ConfigError("unknown pool mode '" + std::string(text) + "' (max|average)");
}

std::string_view to_string(PoolMode mode) { return mode == PoolMode::max ? "max" : "average"; }

PoolOutput regionlet_pool_forward(const Tensor& values, const PoolConfig& cfg) {
  const Dims4 d = split_dims(values, "regionlet_pool_forward");
  if (cfg.out_h == 0 || cfg.out_w == 0 || cfg.out_h > d.h || cfg.out_w > d.w ||
      d.h % cfg.out_h != 0 || d.w % cfg.out_w != 0) {
    throw std::invalid_argument("regionlet_pool_forward: cannot partition " + std::to_string(d.h) +
                                "x" + std::to_string(d.w) + " into " + std::to_string(cfg.out_h) +
                                "x" + std::to_string(cfg.out_w) + " equal windows");
  }
  const std::size_t win_h = d.h / cfg.out_h, win_w = d.w / cfg.out_w;
  Shape out_shape = values.rank() == 3 ? Shape{d.c, cfg.out_h, cfg.out_w}
                                       : Shape{d.n, d.c, cfg.out_h, cfg.out_w};
  PoolOutput out{Tensor(out_shape), {values.shape(), cfg, {}}};
  if (cfg.mode == PoolMode::max) out.cache.argmax.resize(out.pooled.size());
  const double inv_area = 1.0 / static_cast<double>(win_h * win_w);
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < d.n * d.c; ++plane) {
    const std::size_t base = plane * d.h * d.w;
    for (std::size_t oy = 0; oy < cfg.out_h; ++oy) {
      for (std::size_t ox = 0; ox < cfg.out_w; ++ox, ++o) {
        std::size_t best = base + oy * win_h * d.w + ox * win_w;
        double acc = 0.0;
        for (std::size_t y = oy * win_h; y < (oy + 1) * win_h; ++y) {
          for (std::size_t x = ox * win_w; x < (ox + 1) * win_w; ++x) {
            const std::size_t idx = base + y * d.w + x;
            acc += values[idx];
            if (values[idx] > values[best]) best = idx;
          }
        }
        if (cfg.mode == PoolMode::max) {
          out.pooled[o] = values[best];
          out.cache.argmax[o] = best;
        } else {
          out.pooled[o] = acc * inv_area;
        }
      }
    }
  }
  return out;
}

Tensor regionlet_pool_backward(const PoolCache& cache, const Tensor& upstream) {
  if (cache.empty()) throw std::invalid_argument("regionlet_pool_backward: missing forward cache");
  Tensor grad(cache.input_shape);
  const Dims4 d = split_dims(grad, "regionlet_pool_backward");
  const PoolConfig& cfg = cache.cfg;
  const Shape expected = cache.input_shape.size() == 3 ? Shape{d.c, cfg.out_h, cfg.out_w}
                                                       : Shape{d.n, d.c, cfg.out_h, cfg.out_w};
  require_shape(upstream, expected, "regionlet_pool_backward upstream");
  if (cfg.mode == PoolMode::max) {
    for (std::size_t o = 0; o < upstream.size(); ++o) grad[cache.argmax[o]] += upstream[o];
    return grad;
  }
  const std::size_t win_h = d.h / cfg.out_h, win_w = d.w / cfg.out_w;
  const double inv_area = 1.0 / static_cast<double>(win_h * win_w);
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < d.n * d.c; ++plane) {
    const std::size_t base = plane * d.h * d.w;
    for (std::size_t oy = 0; oy < cfg.out_h; ++oy) {
      for (std::size_t ox = 0; ox < cfg.out_w; ++ox, ++o) {
        const double share = upstream[o] * inv_area;
        for (std::size_t y = oy * win_h; y < (oy + 1) * win_h; ++y) {
          for (std::size_t x = ox * win_w; x < (ox + 1) * win_w; ++x) grad[base + y * d.w + x] += share;
        }
      }
    }
  }
  return grad;
}

}  // namespace regionlets
