#include "regionlets/detector.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "regionlets/config.hpp"

namespace regionlets {

namespace {

constexpr ConvGeometry kBackboneConv{2, 1};
constexpr std::size_t kBackboneKernel = 3;

void add_into(Tensor& dst, const Tensor& src) {
  require_shape(src, dst.shape(), "gradient accumulation");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Tensor normal_tensor(Shape shape, double stddev, SplitMix64& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

}  // namespace

// ---- configuration and parameters ---------------------------------------------

std::size_t DetectorConfig::region_feature_size() const {
  return rsn.num_regions * feature_channels() * pool.out_h * pool.out_w;
}

void DetectorConfig::validate() const {
  rsn.grid_side();
  if (rsn.hidden == 0) throw ConfigError("rsn.hidden must be positive");
  if (rsn.summary_grid == 0) throw ConfigError("rsn.summary_grid must be positive");
  if (head.num_classes < 2) throw ConfigError("head.num_classes must count background plus >= 1 class");
  if (head.density_h == 0 || head.density_w == 0) throw ConfigError("head.density must be positive");
  if (head.fc_hidden == 0) throw ConfigError("head.fc_hidden must be positive");
  if (pool.out_h == 0 || pool.out_w == 0 || head.density_h % pool.out_h != 0 ||
      head.density_w % pool.out_w != 0) {
    throw ConfigError("pool.out must evenly partition head.density");
  }
  if (!(head.nms_iou > 0.0 && head.nms_iou <= 1.0)) throw ConfigError("head.nms_iou must be in (0,1]");
  if (!(head.score_thresh >= 0.0 && head.score_thresh <= 1.0)) {
    throw ConfigError("head.score_thresh must be in [0,1]");
  }
  if (!(head.lambda_reg >= 0.0)) throw ConfigError("head.lambda_reg must be non-negative");
  for (auto c : backbone_channels) {
    if (c == 0) throw ConfigError("backbone channels must be positive");
  }
}

DetectorParams DetectorParams::zeros_like() const {
  DetectorParams z = *this;
  z.for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
  return z;
}

std::size_t DetectorParams::scalar_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

DetectorParams init_detector(const DetectorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SplitMix64 rng(seed);
  DetectorParams p;
  std::size_t c_in = cfg.image_channels;
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t c_out = cfg.backbone_channels[l];
    const double sd = std::sqrt(2.0 / static_cast<double>(c_in * kBackboneKernel * kBackboneKernel));
    p.backbone[l] = {normal_tensor({c_out, c_in, kBackboneKernel, kBackboneKernel}, sd, rng),
                     Tensor({c_out})};
    c_in = c_out;
  }
  const std::size_t c = cfg.feature_channels();
  p.rsn = rsn_init(c * cfg.rsn.summary_grid * cfg.rsn.summary_grid, cfg.rsn, rng);
  if (cfg.gate.enabled) {
    for (std::size_t k = 0; k < cfg.rsn.num_regions; ++k) {
      p.gates.push_back(gate_init(c, cfg.head.density_h, cfg.head.density_w, cfg.gate.granularity));
    }
  }
  const std::size_t d = cfg.region_feature_size();
  p.trunk = {normal_tensor({d, cfg.head.fc_hidden}, std::sqrt(2.0 / static_cast<double>(d)), rng),
             Tensor({cfg.head.fc_hidden})};
  // Fan-in scaled classifier keeps untrained scores near uniform without starving the trunk
  // of gradient; the box layer starts near zero shift.
  const double cls_sd = std::sqrt(1.0 / static_cast<double>(cfg.head.fc_hidden));
  p.cls = {normal_tensor({cfg.head.fc_hidden, cfg.head.num_classes}, cls_sd, rng),
           Tensor({cfg.head.num_classes})};
  p.box = {normal_tensor({cfg.head.fc_hidden, 4}, 0.001, rng), Tensor({4})};
  return p;
}

NamedTensors to_named_tensors(const DetectorParams& params) {
  NamedTensors out;
  params.for_each([&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
  return out;
}

DetectorParams from_named_tensors(const NamedTensors& tensors, const DetectorConfig& cfg) {
  DetectorParams p = init_detector(cfg, 0);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) {
    if (!by_name.emplace(name, &t).second) throw CheckpointError("duplicate tensor " + name);
  }
  std::size_t used = 0;
  p.for_each([&](const std::string& name, Tensor& t) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks tensor " + name);
    if (it->second->shape() != t.shape()) {
      throw CheckpointError("tensor " + name + " has shape " + shape_to_string(it->second->shape()) +
                            ", config expects " + shape_to_string(t.shape()));
    }
    t = *it->second;
    ++used;
  });
  if (used != by_name.size()) throw CheckpointError("checkpoint has tensors the config does not use");
  return p;
}

// ---- backbone ------------------------------------------------------------------

Tensor backbone_forward(const Tensor& image, const DetectorParams& params, BackboneCache* cache) {
  if (image.rank() != 3) throw ShapeError("backbone expects a [C,H,W] image");
  Tensor x = image;
  for (auto& v : x.values()) v -= 0.5;
  for (std::size_t l = 0; l < 3; ++l) {
    Tensor pre = conv2d_forward(x, params.backbone[l].weights, params.backbone[l].bias, kBackboneConv);
    Tensor act = relu_forward(pre);
    if (cache) {
      cache->inputs[l] = std::move(x);
      cache->pre[l] = std::move(pre);
    }
    x = std::move(act);
  }
  return x;
}

void backbone_backward(const BackboneCache& cache, const Tensor& d_features,
                       const DetectorParams& params, DetectorParams& grads) {
  Tensor d = d_features;
  for (std::size_t l = 3; l-- > 0;) {
    LayerGradients g = conv2d_backward(cache.inputs[l], params.backbone[l].weights,
                                       relu_backward(cache.pre[l], d), kBackboneConv);
    add_into(grads.backbone[l].weights, g.wrt_params[0]);
    add_into(grads.backbone[l].bias, g.wrt_params[1]);
    d = std::move(g.wrt_input);
  }
}

// ---- head ----------------------------------------------------------------------

HeadOutput head_forward(std::span<const Tensor> feature_maps, std::span<const RoiRef> rois,
                        const DetectorParams& params, const DetectorConfig& cfg) {
  if (rois.empty()) throw std::invalid_argument("head_forward: at least one RoI is required");
  const std::size_t n_rois = rois.size(), channels = cfg.feature_channels();
  const std::size_t s = cfg.rsn.summary_grid, n_regions = cfg.rsn.num_regions;
  const std::size_t h = cfg.head.density_h, w = cfg.head.density_w, points = h * w;
  const double stride = DetectorConfig::feature_stride;

  HeadOutput out;
  HeadCache& cache = out.cache;
  cache.rois.assign(rois.begin(), rois.end());

  Tensor summary({n_rois, channels * s * s});
  for (std::size_t n = 0; n < n_rois; ++n) {
    if (rois[n].image >= feature_maps.size()) throw std::out_of_range("RoI refers to a missing image");
    RoiSummary sum = summarize_roi(feature_maps[rois[n].image], rois[n].roi, stride, s);
    std::copy_n(sum.values.data(), sum.values.size(), summary.data() + n * sum.values.size());
    cache.summary_grids.push_back(std::move(sum.grid));
  }
  cache.rsn = rsn_forward(summary, params.rsn);

  cache.region_values.assign(n_regions, Tensor({n_rois, channels, h, w}));
  cache.region_grids.reserve(n_rois * n_regions);
  for (std::size_t n = 0; n < n_rois; ++n) {
    const Tensor& map = feature_maps[rois[n].image];
    for (std::size_t k = 0; k < n_regions; ++k) {
      SampleGrid grid = grid_generate(cache.rsn.region(n, k), rois[n].roi, h, w, stride);
      WarpedRegionlets v = warp_forward(map, grid);
      std::copy_n(v.values.data(), channels * points,
                  cache.region_values[k].data() + n * channels * points);
      cache.region_grids.push_back(std::move(grid));
    }
  }

  const std::size_t per_region = channels * cfg.pool.out_h * cfg.pool.out_w;
  cache.features = Tensor({n_rois, n_regions * per_region});
  for (std::size_t k = 0; k < n_regions; ++k) {
    PoolOutput pooled;
    if (cfg.gate.enabled) {
      GateOutput g = gate_forward(cache.region_values[k], params.gates.at(k), cfg.gate.granularity);
      pooled = regionlet_pool_forward(g.gated, cfg.pool);
      cache.gates.push_back(std::move(g.cache));
    } else {
      pooled = regionlet_pool_forward(cache.region_values[k], cfg.pool);
    }
    for (std::size_t n = 0; n < n_rois; ++n) {
      std::copy_n(pooled.pooled.data() + n * per_region, per_region,
                  cache.features.data() + n * n_regions * per_region + k * per_region);
    }
    cache.pools.push_back(std::move(pooled.cache));
  }

  cache.trunk_pre = fc_forward(cache.features, params.trunk);
  cache.trunk_act = relu_forward(cache.trunk_pre);
  out.logits = fc_forward(cache.trunk_act, params.cls);
  out.deltas = fc_forward(cache.trunk_act, params.box);
  require_finite(out.logits, "classification logits");
  require_finite(out.deltas, "box deltas");
  out.probs = softmax(out.logits);
  return out;
}

void head_backward(const HeadCache& cache, std::span<const Tensor> feature_maps,
                   const Tensor& d_logits, const Tensor& d_deltas, const DetectorParams& params,
                   const DetectorConfig& cfg, DetectorParams& grads,
                   std::vector<Tensor>& d_feature_maps) {
  if (cache.empty()) throw std::invalid_argument("head_backward: missing forward cache");
  if (d_feature_maps.size() != feature_maps.size()) {
    throw std::invalid_argument("head_backward: one gradient buffer per feature map is required");
  }
  const std::size_t n_rois = cache.rois.size(), channels = cfg.feature_channels();
  const std::size_t n_regions = cfg.rsn.num_regions;
  const std::size_t h = cfg.head.density_h, w = cfg.head.density_w, points = h * w;

  LayerGradients g_cls = fc_backward(cache.trunk_act, params.cls.weights, d_logits);
  LayerGradients g_box = fc_backward(cache.trunk_act, params.box.weights, d_deltas);
  add_into(grads.cls.weights, g_cls.wrt_params[0]);
  add_into(grads.cls.bias, g_cls.wrt_params[1]);
  add_into(grads.box.weights, g_box.wrt_params[0]);
  add_into(grads.box.bias, g_box.wrt_params[1]);
  Tensor d_act = g_cls.wrt_input;
  add_into(d_act, g_box.wrt_input);
  LayerGradients g_trunk =
      fc_backward(cache.features, params.trunk.weights, relu_backward(cache.trunk_pre, d_act));
  add_into(grads.trunk.weights, g_trunk.wrt_params[0]);
  add_into(grads.trunk.bias, g_trunk.wrt_params[1]);
  const Tensor& d_features = g_trunk.wrt_input;

  const auto mask = freeze_mask(cfg.rsn.mode, n_regions);
  const std::size_t per_region = channels * cfg.pool.out_h * cfg.pool.out_w;
  Tensor d_theta({n_rois, 6 * n_regions});
  Tensor d_region({channels, h, w});
  for (std::size_t k = 0; k < n_regions; ++k) {
    Tensor d_pooled({n_rois, channels, cfg.pool.out_h, cfg.pool.out_w});
    for (std::size_t n = 0; n < n_rois; ++n) {
      std::copy_n(d_features.data() + n * n_regions * per_region + k * per_region, per_region,
                  d_pooled.data() + n * per_region);
    }
    Tensor d_values = regionlet_pool_backward(cache.pools[k], d_pooled);
    if (cfg.gate.enabled) {
      LayerGradients g = gate_backward(cache.gates[k], d_values, params.gates[k]);
      add_into(grads.gates[k].weights, g.wrt_params[0]);
      add_into(grads.gates[k].bias, g.wrt_params[1]);
      d_values = std::move(g.wrt_input);
    }
    for (std::size_t n = 0; n < n_rois; ++n) {
      std::copy_n(d_values.data() + n * channels * points, channels * points, d_region.data());
      const SampleGrid& grid = cache.region_grids[n * n_regions + k];
      const std::size_t img = cache.rois[n].image;
      warp_accumulate_input(d_region, grid, d_feature_maps[img]);
      const auto d_t = warp_backward_theta(d_region, grid, feature_maps[img]);
      for (std::size_t i = 0; i < 6; ++i) d_theta(n, 6 * k + i) = d_t[i] * mask[i];
    }
  }

  LayerGradients g_rsn = rsn_backward(cache.rsn.cache, d_theta, params.rsn);
  FcParams* rsn_layers[3] = {&grads.rsn.fc1, &grads.rsn.fc2, &grads.rsn.head};
  for (std::size_t l = 0; l < 3; ++l) {
    add_into(rsn_layers[l]->weights, g_rsn.wrt_params[2 * l]);
    add_into(rsn_layers[l]->bias, g_rsn.wrt_params[2 * l + 1]);
  }
  const std::size_t s = cfg.rsn.summary_grid;
  Tensor d_summary({channels, s, s});
  for (std::size_t n = 0; n < n_rois; ++n) {
    std::copy_n(g_rsn.wrt_input.data() + n * d_summary.size(), d_summary.size(), d_summary.data());
    warp_accumulate_input(d_summary, cache.summary_grids[n], d_feature_maps[cache.rois[n].image]);
  }
}

// ---- targets, boxes, losses ---------------------------------------------------

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::array<double, 4> encode_deltas(const RegionOfInterest& roi, const Box& target) {
  const double rcx = roi.x0 + 0.5 * roi.width, rcy = roi.y0 + 0.5 * roi.height;
  const double gcx = 0.5 * (target.x1 + target.x2), gcy = 0.5 * (target.y1 + target.y2);
  return {(gcx - rcx) / roi.width, (gcy - rcy) / roi.height, std::log(target.width() / roi.width),
          std::log(target.height() / roi.height)};
}

Box decode_deltas(const RegionOfInterest& roi, const std::array<double, 4>& d) {
  const double cx = roi.x0 + 0.5 * roi.width + d[0] * roi.width;
  const double cy = roi.y0 + 0.5 * roi.height + d[1] * roi.height;
  // exp of an unbounded prediction can overflow; log(1000/16) is far beyond any sane box.
  const double w = roi.width * std::exp(std::min(d[2], 4.0));
  const double h = roi.height * std::exp(std::min(d[3], 4.0));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<RoiTarget> assign_targets(std::span<const RegionOfInterest> rois,
                                      std::span<const GroundTruth> gt, double fg_iou) {
  std::vector<RoiTarget> targets(rois.size());
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const Box rb = to_box(rois[r]);
    std::size_t best = gt.size();
    double best_iou = -1.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(rb, gt[g].box);
      if (v > best_iou) {
        best_iou = v;
        best = g;
      }
    }
    if (best == gt.size()) continue;
    targets[r].best_iou = best_iou;
    if (best_iou >= fg_iou) {
      targets[r].label = gt[best].label;
      targets[r].deltas = encode_deltas(rois[r], gt[best].box);
    }
  }
  return targets;
}

LossBreakdown batch_loss(std::span<const DetectionInstance* const> batch,
                         const DetectorParams& params, const DetectorConfig& cfg,
                         DetectorParams* grads) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  std::vector<Tensor> maps;
  std::vector<BackboneCache> backbone_caches(batch.size());
  std::vector<RoiRef> rois;
  std::vector<int> labels;
  std::vector<std::size_t> fg_rows;
  std::vector<std::array<double, 4>> fg_targets;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const DetectionInstance& inst = *batch[i];
    maps.push_back(backbone_forward(inst.image, params, grads ? &backbone_caches[i] : nullptr));
    const auto targets = assign_targets(inst.proposals, inst.gt, cfg.head.fg_iou);
    for (std::size_t r = 0; r < inst.proposals.size(); ++r) {
      if (targets[r].label != 0) {
        fg_rows.push_back(rois.size());
        fg_targets.push_back(targets[r].deltas);
      }
      rois.push_back({i, inst.proposals[r]});
      labels.push_back(targets[r].label);
    }
  }

  HeadOutput out = head_forward(maps, rois, params, cfg);
  LossResult ce = softmax_cross_entropy(out.logits, labels);
  LossBreakdown loss;
  loss.rois = rois.size();
  loss.foreground = fg_rows.size();
  loss.cls = ce.loss;
  LossResult reg;
  if (!fg_rows.empty()) {
    Tensor pred({fg_rows.size(), 4}), target({fg_rows.size(), 4});
    for (std::size_t f = 0; f < fg_rows.size(); ++f) {
      for (std::size_t j = 0; j < 4; ++j) {
        pred(f, j) = out.deltas(fg_rows[f], j);
        target(f, j) = fg_targets[f][j] / kDeltaScale[j];
      }
    }
    reg = smooth_l1(pred, target);
    loss.reg = reg.loss;
  }
  loss.total = loss.cls + cfg.head.lambda_reg * loss.reg;
  if (!std::isfinite(loss.total)) {
    throw NumericError("non-finite loss (cls " + std::to_string(loss.cls) + ", reg " +
                       std::to_string(loss.reg) + ")");
  }
  if (!grads) return loss;

  Tensor d_deltas({rois.size(), 4});
  for (std::size_t f = 0; f < fg_rows.size(); ++f) {
    for (std::size_t j = 0; j < 4; ++j) d_deltas(fg_rows[f], j) = cfg.head.lambda_reg * reg.grad(f, j);
  }
  std::vector<Tensor> d_maps;
  for (const auto& m : maps) d_maps.push_back(Tensor::zeros_like(m));
  head_backward(out.cache, maps, ce.grad, d_deltas, params, cfg, *grads, d_maps);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    backbone_backward(backbone_caches[i], d_maps[i], params, *grads);
  }
  return loss;
}

// ---- inference -----------------------------------------------------------------

std::vector<Detection> nms(std::span<const Detection> detections, double iou_threshold) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });
  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    const Detection& d = detections[idx];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> detect(const DetectionInstance& instance, const DetectorParams& params,
                              const DetectorConfig& cfg) {
  if (instance.proposals.empty()) return {};
  const Tensor map = backbone_forward(instance.image, params, nullptr);
  std::vector<RoiRef> rois;
  for (const auto& p : instance.proposals) rois.push_back({0, p});
  const HeadOutput out = head_forward(std::span<const Tensor>(&map, 1), rois, params, cfg);

  const double img_w = static_cast<double>(instance.image.dim(2));
  const double img_h = static_cast<double>(instance.image.dim(1));
  std::vector<std::vector<Detection>> per_class(cfg.head.num_classes);
  for (std::size_t n = 0; n < rois.size(); ++n) {
    std::array<double, 4> d;
    for (std::size_t j = 0; j < 4; ++j) d[j] = out.deltas(n, j) * kDeltaScale[j];
    Box b = decode_deltas(rois[n].roi, d);
    b.x1 = std::clamp(b.x1, 0.0, img_w);
    b.x2 = std::clamp(b.x2, 0.0, img_w);
    b.y1 = std::clamp(b.y1, 0.0, img_h);
    b.y2 = std::clamp(b.y2, 0.0, img_h);
    if (!(b.x2 > b.x1 && b.y2 > b.y1)) continue;
    for (std::size_t c = 1; c < cfg.head.num_classes; ++c) {
      const double score = out.probs(n, c);
      if (score < cfg.head.score_thresh) continue;
      per_class[c].push_back({b, static_cast<int>(c), score});
    }
  }
  std::vector<Detection> result;
  for (std::size_t c = 1; c < cfg.head.num_classes; ++c) {
    const auto kept = nms(per_class[c], cfg.head.nms_iou);
    result.insert(result.end(), kept.begin(), kept.end());
  }
  return result;
}

}  // namespace regionlets
