#include "regionlets/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "regionlets/bench.hpp"
#include "regionlets/detector.hpp"
#include "regionlets/gating_pool.hpp"
#include "regionlets/layers.hpp"
#include "regionlets/region_selection.hpp"
#include "regionlets/rng.hpp"
#include "regionlets/warp.hpp"

namespace regionlets {

double central_diff(const ScalarFn& f, const Tensor& point, std::size_t index, double step) {
  if (index >= point.size()) throw std::out_of_range("central_diff: index outside the point");
  if (!(step > 0.0)) throw std::invalid_argument("central_diff: step must be positive");
  Tensor x = point;
  x[index] = point[index] + step;
  const double up = f(x);
  x[index] = point[index] - step;
  const double down = f(x);
  return (up - down) / (2.0 * step);
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradReport compare_gradient(const ScalarFn& f, const Tensor& point, const Tensor& analytic,
                            double tolerance, double step) {
  require_shape(analytic, point.shape(), "compare_gradient analytic");
  GradReport r;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double numeric = central_diff(f, point, i, step);
    const double err = relative_error(analytic[i], numeric);
    if (i == 0 || err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_index = i;
      r.analytic = analytic[i];
      r.numeric = numeric;
    }
  }
  r.passed = r.max_rel_error <= tolerance;
  return r;
}

namespace {

constexpr double kStep = 1e-5;
constexpr double kLatticeMargin = 1e-3;
constexpr std::size_t kHeadProbes = 10;
constexpr double kHeadMinGradient = 1e-6;
constexpr double kKinkRatio = 1e-5;

// One differentiable argument of an instance: the point, the scalar loss as
// a function of that argument alone, and the analytic gradient under test.
struct Probe {
  std::string argument;
  Tensor point;
  ScalarFn f;
  Tensor analytic;
  std::vector<std::size_t> indices;  // empty: every coordinate
};

Tensor uniform_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

std::size_t pick(SplitMix64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

// Scalar loss sum(r * out) measured relative to the output at the unperturbed
// point. Outputs a perturbation does not touch cancel exactly, so rounding
// in the difference quotient comes only from the affected entries.
struct Readout {
  Tensor r;
  Tensor base;
  double operator()(const Tensor& out) const {
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += r[i] * (out[i] - base[i]);
    return s;
  }
};

bool near_lattice(const SampleGrid& g) {
  for (std::size_t p = 0; p < g.points(); ++p) {
    for (double v : {g.source_x[p], g.source_y[p]}) {
      if (std::abs(v - std::round(v)) < kLatticeMargin) return true;
    }
  }
  return false;
}

std::vector<Probe> fc_instance(SplitMix64& rng) {
  const std::size_t batch = pick(rng, 1, 4), d_in = pick(rng, 1, 6), d_out = pick(rng, 1, 6);
  Tensor x = uniform_tensor({batch, d_in}, rng), w = uniform_tensor({d_in, d_out}, rng),
         b = uniform_tensor({d_out}, rng), r = uniform_tensor({batch, d_out}, rng);
  LayerGradients g = fc_backward(x, w, r);
  const Readout ro{r, fc_forward(x, w, b)};
  return {
      {"input", x, [=](const Tensor& v) { return ro(fc_forward(v, w, b)); }, g.wrt_input, {}},
      {"weights", w, [=](const Tensor& v) { return ro(fc_forward(x, v, b)); }, g.wrt_params[0], {}},
      {"bias", b, [=](const Tensor& v) { return ro(fc_forward(x, w, v)); }, g.wrt_params[1], {}},
  };
}

std::vector<Probe> conv_instance(SplitMix64& rng) {
  const std::size_t c_in = pick(rng, 1, 3), c_out = pick(rng, 1, 3);
  const std::size_t h = pick(rng, 3, 7), w = pick(rng, 3, 7);
  const std::size_t k = rng.below(2) ? 3 : 1;
  const ConvGeometry geom{pick(rng, 1, 2), k == 3 ? pick(rng, 0, 1) : 0};
  Tensor x = uniform_tensor({c_in, h, w}, rng), wt = uniform_tensor({c_out, c_in, k, k}, rng),
         b = uniform_tensor({c_out}, rng);
  Tensor r = uniform_tensor({c_out, conv_output_extent(h, k, geom), conv_output_extent(w, k, geom)}, rng);
  LayerGradients g = conv2d_backward(x, wt, r, geom);
  const Readout ro{r, conv2d_forward(x, wt, b, geom)};
  return {
      {"input", x, [=](const Tensor& v) { return ro(conv2d_forward(v, wt, b, geom)); }, g.wrt_input, {}},
      {"weights", wt, [=](const Tensor& v) { return ro(conv2d_forward(x, v, b, geom)); }, g.wrt_params[0], {}},
      {"bias", b, [=](const Tensor& v) { return ro(conv2d_forward(x, wt, v, geom)); }, g.wrt_params[1], {}},
  };
}

std::vector<Probe> relu_instance(SplitMix64& rng) {
  Tensor x({pick(rng, 1, 4), pick(rng, 1, 8)});
  for (auto& v : x.values()) {
    do v = rng.uniform(-1.0, 1.0);
    while (std::abs(v) < kLatticeMargin);
  }
  Tensor r = uniform_tensor(x.shape(), rng);
  const Readout ro{r, relu_forward(x)};
  return {{"input", x, [=](const Tensor& v) { return ro(relu_forward(v)); },
           relu_backward(x, r), {}}};
}

std::vector<Probe> sigmoid_instance(SplitMix64& rng) {
  Tensor x = uniform_tensor({pick(rng, 1, 4), pick(rng, 1, 8)}, rng, -3.0, 3.0);
  Tensor r = uniform_tensor(x.shape(), rng);
  const Readout ro{r, sigmoid_forward(x)};
  return {{"input", x, [=](const Tensor& v) { return ro(sigmoid_forward(v)); },
           sigmoid_backward(sigmoid_forward(x), r), {}}};
}

std::vector<Probe> softmax_ce_instance(SplitMix64& rng) {
  const std::size_t batch = pick(rng, 1, 4), k = pick(rng, 2, 6);
  Tensor logits = uniform_tensor({batch, k}, rng, -3.0, 3.0);
  std::vector<int> labels(batch);
  for (auto& l : labels) l = static_cast<int>(rng.below(k));
  return {{"logits", logits,
           [=](const Tensor& v) { return softmax_cross_entropy(v, labels).loss; },
           softmax_cross_entropy(logits, labels).grad, {}}};
}

std::vector<Probe> smooth_l1_instance(SplitMix64& rng) {
  const Shape shape{pick(rng, 1, 4), 4};
  Tensor pred = uniform_tensor(shape, rng, -2.0, 2.0), target = uniform_tensor(shape, rng, -2.0, 2.0);
  Tensor g = smooth_l1(pred, target).grad;
  Tensor g_target = g;
  for (auto& v : g_target.values()) v = -v;
  return {
      {"pred", pred, [=](const Tensor& v) { return smooth_l1(v, target).loss; }, g, {}},
      {"target", target, [=](const Tensor& v) { return smooth_l1(pred, v).loss; }, g_target, {}},
  };
}

struct WarpCase {
  Tensor map;
  AffineParams theta;
  RegionOfInterest roi;
  std::size_t h = 0, w = 0;
  double stride = 1.0;
  SampleGrid grid;
};

WarpCase warp_case(SplitMix64& rng) {
  for (;;) {
    WarpCase c;
    const std::size_t ch = pick(rng, 1, 3), mh = pick(rng, 3, 7), mw = pick(rng, 3, 7);
    c.map = uniform_tensor({ch, mh, mw}, rng);
    c.h = c.w = pick(rng, 2, 4);
    c.stride = rng.below(2) ? 1.0 : 2.0;
    for (auto& t : c.theta.theta) t = rng.uniform(-1.0, 1.0);
    const double ext_w = static_cast<double>(mw) * c.stride, ext_h = static_cast<double>(mh) * c.stride;
    c.roi.width = rng.uniform(0.3, 1.0) * ext_w;
    c.roi.height = rng.uniform(0.3, 1.0) * ext_h;
    c.roi.x0 = rng.uniform(0.0, ext_w - c.roi.width);
    c.roi.y0 = rng.uniform(0.0, ext_h - c.roi.height);
    c.grid = grid_generate(c.theta, c.roi, c.h, c.w, c.stride);
    if (!near_lattice(c.grid)) return c;
  }
}

std::vector<Probe> warp_input_instance(SplitMix64& rng) {
  WarpCase c = warp_case(rng);
  Tensor r = uniform_tensor({c.map.dim(0), c.h, c.w}, rng);
  const SampleGrid grid = c.grid;
  const Readout ro{r, warp_forward(c.map, grid).values};
  return {{"feature_map", c.map,
           [=](const Tensor& u) { return ro(warp_forward(u, grid).values); },
           warp_backward_input(r, grid, c.map.shape()), {}}};
}

std::vector<Probe> warp_theta_instance(SplitMix64& rng) {
  WarpCase c = warp_case(rng);
  Tensor r = uniform_tensor({c.map.dim(0), c.h, c.w}, rng);
  Tensor theta({6}, std::vector<double>(c.theta.theta.begin(), c.theta.theta.end()));
  const auto d = warp_backward_theta(r, c.grid, c.map);
  const Readout ro{r, warp_forward(c.map, c.grid).values};
  Tensor analytic({6}, std::vector<double>(d.begin(), d.end()));
  return {{"theta", theta,
           [=](const Tensor& t) {
             AffineParams a;
             std::copy_n(t.data(), 6, a.theta.begin());
             return ro(warp_forward(c.map, grid_generate(a, c.roi, c.h, c.w, c.stride)).values);
           },
           analytic, {}}};
}

std::vector<Probe> gate_instance(SplitMix64& rng, std::uint64_t seed) {
  const auto gran = seed % 2 ? GateGranularity::per_regionlet : GateGranularity::per_element;
  const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 3), h = pick(rng, 1, 3), w = pick(rng, 1, 3);
  Tensor v = uniform_tensor({n, c, h, w}, rng);
  const std::size_t n_gates = gate_output_count(c, h, w, gran);
  // Fan-in scaled weights keep the sigmoids away from saturation.
  const double bound = 1.0 / std::sqrt(static_cast<double>(c * h * w));
  FcParams p{uniform_tensor({c * h * w, n_gates}, rng, -bound, bound), uniform_tensor({n_gates}, rng)};
  Tensor r = uniform_tensor(v.shape(), rng);
  GateOutput out = gate_forward(v, p, gran);
  LayerGradients g = gate_backward(out.cache, r, p);
  const Readout ro{r, out.gated};
  return {
      {"values", v, [=](const Tensor& x) { return ro(gate_forward(x, p, gran).gated); }, g.wrt_input, {}},
      {"weights", p.weights,
       [=](const Tensor& x) { return ro(gate_forward(v, FcParams{x, p.bias}, gran).gated); },
       g.wrt_params[0], {}},
      {"bias", p.bias,
       [=](const Tensor& x) { return ro(gate_forward(v, FcParams{p.weights, x}, gran).gated); },
       g.wrt_params[1], {}},
  };
}

std::vector<Probe> pool_instance(SplitMix64& rng, PoolMode mode) {
  const std::size_t h = 2 * pick(rng, 1, 3), w = 2 * pick(rng, 1, 3);
  const PoolConfig cfg{mode, rng.below(2) ? h / 2 : 1, rng.below(2) ? w / 2 : 1};
  Tensor x = uniform_tensor({pick(rng, 1, 3), h, w}, rng);
  Tensor r = uniform_tensor({x.dim(0), cfg.out_h, cfg.out_w}, rng);
  const PoolOutput out = regionlet_pool_forward(x, cfg);
  const Readout ro{r, out.pooled};
  return {{"values", x, [=](const Tensor& v) { return ro(regionlet_pool_forward(v, cfg).pooled); },
           regionlet_pool_backward(out.cache, r), {}}};
}

std::vector<Probe> rsn_instance(SplitMix64& rng) {
  const std::size_t n = pick(rng, 1, 3), d = pick(rng, 2, 8), hidden = pick(rng, 2, 8);
  const std::size_t k = 4;
  RsnParams p{{uniform_tensor({d, hidden}, rng), uniform_tensor({hidden}, rng, -0.2, 0.2)},
              {uniform_tensor({hidden, hidden}, rng, -0.5, 0.5), uniform_tensor({hidden}, rng, -0.2, 0.2)},
              {uniform_tensor({hidden, 6 * k}, rng, -0.2, 0.2), uniform_tensor({6 * k}, rng, -0.5, 0.5)}};
  Tensor x = uniform_tensor({n, d}, rng);
  Tensor r = uniform_tensor({n, 6 * k}, rng);
  const RsnOutput out = rsn_forward(x, p);
  const LayerGradients g = rsn_backward(out.cache, r, p);
  const Readout ro{r, out.theta};
  auto loss_with = [=](int slot) {
    return [=](const Tensor& v) {
      RsnParams q = p;
      Tensor input = x;
      Tensor* targets[7] = {&input, &q.fc1.weights, &q.fc1.bias, &q.fc2.weights, &q.fc2.bias,
                            &q.head.weights, &q.head.bias};
      *targets[slot] = v;
      return ro(rsn_forward(input, q).theta);
    };
  };
  const char* names[7] = {"summary", "fc1.weights", "fc1.bias", "fc2.weights", "fc2.bias",
                          "head.weights", "head.bias"};
  const Tensor* points[7] = {&x, &p.fc1.weights, &p.fc1.bias, &p.fc2.weights, &p.fc2.bias,
                             &p.head.weights, &p.head.bias};
  std::vector<Probe> probes;
  for (int s = 0; s < 7; ++s) {
    probes.push_back({names[s], *points[s], loss_with(s), s == 0 ? g.wrt_input : g.wrt_params[s - 1], {}});
  }
  return probes;
}

// Whole detector on a small synthetic image; cycles through the ablation
// variants so every wiring is exercised.
std::vector<Probe> head_instance(SplitMix64& rng, std::uint64_t seed) {
  DetectorConfig cfg;
  cfg.rsn.hidden = 12;
  cfg.rsn.summary_grid = 2;
  cfg.head.fc_hidden = 12;
  cfg.head.density_h = cfg.head.density_w = 2;
  cfg.backbone_channels = {3, 4, 4};
  switch (seed % 4) {
    case 0: cfg.rsn.num_regions = 4; break;
    case 1: cfg.rsn.num_regions = 4; cfg.rsn.mode = RsnMode::offset_only; cfg.pool.mode = PoolMode::average; break;
    case 2: cfg.rsn.num_regions = 1; cfg.rsn.mode = RsnMode::global; cfg.gate.granularity = GateGranularity::per_regionlet; break;
    case 3: cfg.rsn.num_regions = 4; cfg.gate.enabled = false; break;
  }
  BenchConfig bench;
  bench.image_size = 32;
  bench.max_shapes = 2;
  bench.proposals_per_gt = 2;
  bench.negatives = 1;
  auto inst = std::make_shared<const DetectionInstance>(generate_instance(bench, rng.next()));
  DetectorParams params = init_detector(cfg, rng.next());
  // Break the zero initialisation so every path carries gradient.
  // Frozen columns keep their zero weights, as they do in training, so the
  // frozen affine components stay constant under every perturbation.
  const auto mask = freeze_mask(cfg.rsn.mode, cfg.rsn.num_regions);
  params.rsn.head.weights = uniform_tensor(params.rsn.head.weights.shape(), rng, -0.05, 0.05);
  for (std::size_t i = 0; i < params.rsn.head.weights.size(); ++i) {
    params.rsn.head.weights[i] *= mask[i % params.rsn.head.weights.dim(1) % 6];
  }
  for (auto& g : params.gates) g.weights = uniform_tensor(g.weights.shape(), rng, -0.3, 0.3);
  params.cls.weights = uniform_tensor(params.cls.weights.shape(), rng, -0.5, 0.5);
  params.box.weights = uniform_tensor(params.box.weights.shape(), rng, -0.5, 0.5);
  // Zero biases put every ReLU fed by an all-zero window exactly on its kink.
  params.for_each([&](const std::string& name, Tensor& t) {
    if (name.ends_with(".bias") && name != "rsn.head.bias") {
      for (auto& v : t.values()) v += rng.uniform(-0.1, 0.1);
    }
  });

  const DetectionInstance* batch[1] = {inst.get()};
  DetectorParams grads = params.zeros_like();
  batch_loss(batch, params, cfg, &grads);

  std::vector<std::pair<std::string, const Tensor*>> tensors, grad_tensors;
  params.for_each([&](const std::string& name, const Tensor& t) { tensors.emplace_back(name, &t); });
  grads.for_each([&](const std::string& name, const Tensor& t) { grad_tensors.emplace_back(name, &t); });

  std::vector<Probe> probes;
  for (int attempts = 0; probes.size() < kHeadProbes && attempts < 1000; ++attempts) {
    const std::size_t which = rng.below(tensors.size());
    const std::string name = tensors[which].first;
    const std::size_t index = rng.below(tensors[which].second->size());
    // Frozen affine components are masked by design.
    if (name.starts_with("rsn.head.") && mask[index % 6] == 0.0) continue;
    Probe probe{name, *tensors[which].second,
                [=](const Tensor& v) {
                  const DetectionInstance* one[1] = {inst.get()};
                  DetectorParams q = params;
                  q.for_each([&](const std::string& n, Tensor& t) {
                    if (n == name) t = v;
                  });
                  return batch_loss(one, q, cfg, nullptr).total;
                },
                *grad_tensors[which].second, {index}};
    // Below kHeadMinGradient float64 rounding of the loss dominates the
    // difference quotient. A quotient that moves when the step shrinks means a
    // kink (ReLU, max switch, lattice crossing) lies within one step of the point.
    const double coarse = central_diff(probe.f, probe.point, index, kStep);
    const double fine = central_diff(probe.f, probe.point, index, kStep / 4);
    const double scale = std::max({std::abs(coarse), std::abs(fine), std::abs(probe.analytic[index])});
    if (scale < kHeadMinGradient) continue;
    if (std::abs(coarse - fine) > kKinkRatio * scale) continue;
    probes.push_back(std::move(probe));
  }
  return probes;
}

std::vector<Probe> make_probes(std::string_view module, SplitMix64& rng, std::uint64_t seed) {
  if (module == "fc") return fc_instance(rng);
  if (module == "conv") return conv_instance(rng);
  if (module == "relu") return relu_instance(rng);
  if (module == "sigmoid") return sigmoid_instance(rng);
  if (module == "softmax_ce") return softmax_ce_instance(rng);
  if (module == "smooth_l1") return smooth_l1_instance(rng);
  if (module == "warp_input") return warp_input_instance(rng);
  if (module == "warp_theta") return warp_theta_instance(rng);
  if (module == "gate") return gate_instance(rng, seed);
  if (module == "pool_max") return pool_instance(rng, PoolMode::max);
  if (module == "pool_avg") return pool_instance(rng, PoolMode::average);
  if (module == "rsn") return rsn_instance(rng);
  if (module == "head") return head_instance(rng, seed);
  throw std::invalid_argument("unknown gradcheck module '" + std::string(module) + "'");
}

void apply_mutation(std::vector<Probe>& probes, Mutation mutation) {
  if (mutation == Mutation::none) return;
  if (mutation == Mutation::scale) {
    for (auto& p : probes) {
      for (auto& v : p.analytic.values()) v *= 1.01;
    }
    return;
  }
  double* largest = nullptr;
  for (auto& p : probes) {
    auto visit = [&](std::size_t i) {
      if (!largest || std::abs(p.analytic[i]) > std::abs(*largest)) largest = &p.analytic[i];
    };
    if (p.indices.empty()) {
      for (std::size_t i = 0; i < p.analytic.size(); ++i) visit(i);
    } else {
      for (auto i : p.indices) visit(i);
    }
  }
  if (largest) *largest = -*largest;
}

}  // namespace

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> ids{"fc",         "conv",       "relu",     "sigmoid",
                                            "softmax_ce", "smooth_l1",  "warp_input", "warp_theta",
                                            "gate",       "pool_max",   "pool_avg", "rsn",
                                            "head"};
  return ids;
}

double default_tolerance(std::string_view module) {
  if (module == "warp_theta") return 1e-5;
  if (module == "head") return 1e-4;
  return 1e-6;
}

ModuleCheck check_module(std::string_view module, std::size_t seeds, double tolerance,
                         Mutation mutation, std::uint64_t base_seed) {
  ModuleCheck result{std::string(module), tolerance, {}, true};
  for (std::size_t s = 0; s < seeds; ++s) {
    const std::uint64_t seed = base_seed + s;
    SplitMix64 rng(derive_seed(0x6772616443ULL, seed));
    std::vector<Probe> probes = make_probes(module, rng, seed);
    apply_mutation(probes, mutation);
    GradReport worst;
    worst.module = result.module;
    worst.seed = seed;
    bool first = true;
    for (const auto& p : probes) {
      auto check = [&](std::size_t i) {
        const double numeric = central_diff(p.f, p.point, i, kStep);
        const double err = relative_error(p.analytic[i], numeric);
        if (first || err > worst.max_rel_error) {
          worst.max_rel_error = err;
          worst.argument = p.argument;
          worst.worst_index = i;
          worst.analytic = p.analytic[i];
          worst.numeric = numeric;
          first = false;
        }
      };
      if (p.indices.empty()) {
        for (std::size_t i = 0; i < p.point.size(); ++i) check(i);
      } else {
        for (auto i : p.indices) check(i);
      }
    }
    worst.passed = worst.max_rel_error <= tolerance;
    result.passed = result.passed && worst.passed;
    result.reports.push_back(std::move(worst));
  }
  return result;
}

}  // namespace regionlets
