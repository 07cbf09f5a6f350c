#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "regionlets/checkpoint.hpp"
#include "regionlets/gating_pool.hpp"
#include "regionlets/geometry.hpp"
#include "regionlets/instance.hpp"
#include "regionlets/layers.hpp"
#include "regionlets/region_selection.hpp"
#include "regionlets/warp.hpp"

namespace regionlets {

struct HeadConfig {
  std::size_t num_classes = 4;  // including background (label 0)
  std::size_t density_h = 4;    // regionlets per region
  std::size_t density_w = 4;
  std::size_t fc_hidden = 256;
  double nms_iou = 0.5;
  double score_thresh = 0.5;
  double lambda_reg = 1.0;
  double fg_iou = 0.5;  // RoIs at or above are foreground, below are background
};

struct DetectorConfig {
  RsnConfig rsn;
  GateConfig gate;
  PoolConfig pool;
  HeadConfig head;
  std::array<std::size_t, 3> backbone_channels{8, 16, 16};
  std::size_t image_channels = 3;

  /// Each backbone conv halves the resolution.
  static constexpr double feature_stride = 8.0;

  std::size_t feature_channels() const { return backbone_channels.back(); }
  /// Length of the concatenated per-RoI regionlet descriptor.
  std::size_t region_feature_size() const;
  /// Throws ConfigError on inconsistent settings.
  void validate() const;
};

/// Every learnable tensor of the detector.
struct DetectorParams {
  std::array<ConvParams, 3> backbone;
  RsnParams rsn;
  std::vector<FcParams> gates;  // one per region; empty when gating is off
  FcParams trunk;
  FcParams cls;
  FcParams box;

  /// Visits (name, tensor) in a fixed order; the order defines the checkpoint layout.
  template <class F>
  void for_each(F&& f) {
    for (std::size_t l = 0; l < backbone.size(); ++l) {
      f("backbone." + std::to_string(l) + ".weights", backbone[l].weights);
      f("backbone." + std::to_string(l) + ".bias", backbone[l].bias);
    }
    f(std::string("rsn.fc1.weights"), rsn.fc1.weights);
    f(std::string("rsn.fc1.bias"), rsn.fc1.bias);
    f(std::string("rsn.fc2.weights"), rsn.fc2.weights);
    f(std::string("rsn.fc2.bias"), rsn.fc2.bias);
    f(std::string("rsn.head.weights"), rsn.head.weights);
    f(std::string("rsn.head.bias"), rsn.head.bias);
    for (std::size_t k = 0; k < gates.size(); ++k) {
      f("gate." + std::to_string(k) + ".weights", gates[k].weights);
      f("gate." + std::to_string(k) + ".bias", gates[k].bias);
    }
    f(std::string("trunk.weights"), trunk.weights);
    f(std::string("trunk.bias"), trunk.bias);
    f(std::string("cls.weights"), cls.weights);
    f(std::string("cls.bias"), cls.bias);
    f(std::string("box.weights"), box.weights);
    f(std::string("box.bias"), box.bias);
  }

  template <class F>
  void for_each(F&& f) const {
    const_cast<DetectorParams*>(this)->for_each(
        [&](const std::string& name, Tensor& t) { f(name, static_cast<const Tensor&>(t)); });
  }

  /// Same layout, all zeros (gradient and momentum buffers).
  DetectorParams zeros_like() const;
  std::size_t scalar_count() const;
};

DetectorParams init_detector(const DetectorConfig& cfg, std::uint64_t seed);

NamedTensors to_named_tensors(const DetectorParams& params);
/// Checks every name and shape against the layout `cfg` implies.
DetectorParams from_named_tensors(const NamedTensors& tensors, const DetectorConfig& cfg);

// ---- backbone ------------------------------------------------------------------

struct BackboneCache {
  std::array<Tensor, 3> inputs;
  std::array<Tensor, 3> pre;
};

/// Three 3x3 stride-2 convs with ReLU; the image is centred by subtracting 1/2.
Tensor backbone_forward(const Tensor& image, const DetectorParams& params, BackboneCache* cache);
/// Adds parameter gradients into `grads`.
void backbone_backward(const BackboneCache& cache, const Tensor& d_features,
                       const DetectorParams& params, DetectorParams& grads);

// ---- head ----------------------------------------------------------------------

struct RoiRef {
  std::size_t image = 0;  // index into the feature-map list
  RegionOfInterest roi;
};

struct HeadCache {
  std::vector<RoiRef> rois;
  std::vector<SampleGrid> summary_grids;  // per RoI
  RsnOutput rsn;
  std::vector<SampleGrid> region_grids;  // [roi * K + k]
  std::vector<Tensor> region_values;     // per region k: V for every RoI, [N, C, H, W]
  std::vector<GateCache> gates;          // per region k, when gating is on
  std::vector<PoolCache> pools;          // per region k
  Tensor features;                       // [N, K*C*out_h*out_w]
  Tensor trunk_pre;
  Tensor trunk_act;

  bool empty() const { return rois.empty(); }
};

struct HeadOutput {
  Tensor logits;  // [N, num_classes]
  Tensor probs;   // softmax(logits)
  Tensor deltas;  // [N, 4], normalised box-regression space
  HeadCache cache;
};

/// summary -> RSN -> K warps -> gate -> pool -> concat -> FC trunk -> (logits, deltas).
HeadOutput head_forward(std::span<const Tensor> feature_maps, std::span<const RoiRef> rois,
                        const DetectorParams& params, const DetectorConfig& cfg);

/// Adds parameter gradients into `grads` and feature-map gradients into
/// `d_feature_maps` (one zero-initialised tensor per feature map).
void head_backward(const HeadCache& cache, std::span<const Tensor> feature_maps,
                   const Tensor& d_logits, const Tensor& d_deltas, const DetectorParams& params,
                   const DetectorConfig& cfg, DetectorParams& grads,
                   std::vector<Tensor>& d_feature_maps);

// ---- targets, boxes, losses ---------------------------------------------------

double iou(const Box& a, const Box& b);

/// (dx, dy, dw, dh) of `target` relative to `roi`; log-space for the extents.
std::array<double, 4> encode_deltas(const RegionOfInterest& roi, const Box& target);
Box decode_deltas(const RegionOfInterest& roi, const std::array<double, 4>& deltas);

/// Regression outputs are trained on deltas divided by these.
inline constexpr std::array<double, 4> kDeltaScale{0.1, 0.1, 0.2, 0.2};

struct RoiTarget {
  int label = 0;                    // 0 = background
  std::array<double, 4> deltas{};   // raw deltas to the matched GT (zero for background)
  double best_iou = 0.0;
};

std::vector<RoiTarget> assign_targets(std::span<const RegionOfInterest> rois,
                                      std::span<const GroundTruth> gt, double fg_iou = 0.5);

struct LossBreakdown {
  double cls = 0.0;
  double reg = 0.0;
  double total = 0.0;
  std::size_t rois = 0;
  std::size_t foreground = 0;
};

/// Cross-entropy over all proposals plus lambda * smooth-L1 on foreground proposals.
/// When `grads` is non-null the full backward pass runs and gradients are added to it.
LossBreakdown batch_loss(std::span<const DetectionInstance* const> batch,
                         const DetectorParams& params, const DetectorConfig& cfg,
                         DetectorParams* grads);

// ---- inference -----------------------------------------------------------------

struct Detection {
  Box box;
  int label = 0;
  double score = 0.0;
};

/// Greedy suppression in descending score order (ties: lower input index first).
/// Returns the kept detections in that order.
std::vector<Detection> nms(std::span<const Detection> detections, double iou_threshold);

/// Scores every proposal, thresholds, decodes boxes and runs per-class NMS.
std::vector<Detection> detect(const DetectionInstance& instance, const DetectorParams& params,
                              const DetectorConfig& cfg);

}  // namespace regionlets
