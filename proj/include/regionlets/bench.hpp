#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "regionlets/detector.hpp"
#include "regionlets/instance.hpp"
#include "regionlets/tensor.hpp"

namespace regionlets {

/// Foreground classes of the synthetic benchmark. Label 0 is background.
enum class ShapeClass : int { disk = 1, triangle = 2, bar = 3 };

inline constexpr int kNumShapeClasses = 3;

std::string_view shape_name(int label);

struct BenchConfig {
  std::size_t image_size = 64;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 3;
  double jitter = 0.2;              // proposal scale/translation jitter, fraction of the GT extent
  std::size_t proposals_per_gt = 3;
  std::size_t negatives = 4;        // random boxes per image
  double noise = 0.03;              // per-pixel Gaussian noise on the background
  double max_overlap = 0.1;         // max IoU between GT boxes of one image
};

/// Draws `count` images. Image i depends only on (cfg, derive_seed(seed, i)).
std::vector<DetectionInstance> generate_dataset(const BenchConfig& cfg, std::size_t count,
                                                std::uint64_t seed);

DetectionInstance generate_instance(const BenchConfig& cfg, std::uint64_t image_seed);

// Rendering primitives, exposed for tests. Each returns the fraction of the
// 2x2 subsamples of every pixel that fall inside the shape.
struct Coverage {
  std::size_t size = 0;
  std::vector<double> frac;  // [size * size]
  Box bounds;
};

Coverage render_disk(std::size_t size, double cx, double cy, double radius);
Coverage render_triangle(std::size_t size, double cx, double cy, double circumradius, double angle);
Coverage render_bar(std::size_t size, double cx, double cy, double length, double thickness,
                    double angle);

// ---- evaluation ----------------------------------------------------------------

struct ApReport {
  std::vector<double> per_class_ap;  // index c-1 for class c; NaN when the class has no GT
  double map = 0.0;                  // mean over classes that have at least one GT
};

/// VOC-style AP: detections ranked by score, each greedily matched to the
/// highest-IoU still-unmatched GT of its class; all-points PR integration.
ApReport evaluate_map(std::span<const std::vector<Detection>> detections,
                      std::span<const std::vector<GroundTruth>> ground_truth,
                      std::size_t num_fg_classes, double iou_thresh = 0.5);

// ---- files ---------------------------------------------------------------------

/// Binary PPM (P6); values clamp to [0, 1] and scale to 0..255.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
/// Reads P6 or P3 PPM into [3, H, W] with values in [0, 1].
Tensor read_ppm(const std::filesystem::path& path);

/// One PPM per image plus annotations.txt with lines `<idx> <class> <x1> <y1> <x2> <y2>`.
void export_dataset(const std::filesystem::path& dir, std::span<const DetectionInstance> data);

}  // namespace regionlets
