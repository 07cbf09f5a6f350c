#include "regionlets/bench.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "regionlets/rng.hpp"

namespace regionlets {

std::string_view shape_name(int label) {
  switch (label) {
    case 0: return "background";
    case 1: return "disk";
    case 2: return "triangle";
    case 3: return "bar";
  }
  return "unknown";
}

namespace {

using InsideFn = std::function<bool(double, double)>;

Coverage rasterize(std::size_t size, const Box& bounds, const InsideFn& inside) {
  Coverage cov{size, std::vector<double>(size * size, 0.0), bounds};
  const double lim = static_cast<double>(size);
  const auto x_lo = static_cast<std::size_t>(std::clamp(std::floor(bounds.x1), 0.0, lim));
  const auto x_hi = static_cast<std::size_t>(std::clamp(std::ceil(bounds.x2), 0.0, lim));
  const auto y_lo = static_cast<std::size_t>(std::clamp(std::floor(bounds.y1), 0.0, lim));
  const auto y_hi = static_cast<std::size_t>(std::clamp(std::ceil(bounds.y2), 0.0, lim));
  for (std::size_t y = y_lo; y < y_hi; ++y) {
    for (std::size_t x = x_lo; x < x_hi; ++x) {
      int hits = 0;
      for (double sy : {0.25, 0.75}) {
        for (double sx : {0.25, 0.75}) hits += inside(static_cast<double>(x) + sx, static_cast<double>(y) + sy);
      }
      cov.frac[y * size + x] = hits / 4.0;
    }
  }
  return cov;
}

std::array<std::array<double, 2>, 3> triangle_vertices(double cx, double cy, double r, double angle) {
  std::array<std::array<double, 2>, 3> v;
  for (int k = 0; k < 3; ++k) {
    const double a = angle + 2.0 * std::numbers::pi * k / 3.0;
    v[k] = {cx + r * std::cos(a), cy + r * std::sin(a)};
  }
  return v;
}

std::array<std::array<double, 2>, 4> bar_corners(double cx, double cy, double length,
                                                 double thickness, double angle) {
  const double ux = std::cos(angle), uy = std::sin(angle);
  const double hl = 0.5 * length, ht = 0.5 * thickness;
  std::array<std::array<double, 2>, 4> c;
  int k = 0;
  for (double a : {-hl, hl}) {
    for (double b : {-ht, ht}) c[k++] = {cx + a * ux - b * uy, cy + a * uy + b * ux};
  }
  return c;
}

template <std::size_t N>
Box bounds_of(const std::array<std::array<double, 2>, N>& pts) {
  Box b{pts[0][0], pts[0][1], pts[0][0], pts[0][1]};
  for (const auto& p : pts) {
    b.x1 = std::min(b.x1, p[0]);
    b.y1 = std::min(b.y1, p[1]);
    b.x2 = std::max(b.x2, p[0]);
    b.y2 = std::max(b.y2, p[1]);
  }
  return b;
}

}  // namespace

Coverage render_disk(std::size_t size, double cx, double cy, double radius) {
  const Box bounds{cx - radius, cy - radius, cx + radius, cy + radius};
  const double r2 = radius * radius;
  return rasterize(size, bounds, [=](double x, double y) {
    return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r2;
  });
}

Coverage render_triangle(std::size_t size, double cx, double cy, double circumradius, double angle) {
  const auto v = triangle_vertices(cx, cy, circumradius, angle);
  auto edge = [](const std::array<double, 2>& a, const std::array<double, 2>& b, double x, double y) {
    return (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
  };
  return rasterize(size, bounds_of(v), [=](double x, double y) {
    const double e0 = edge(v[0], v[1], x, y), e1 = edge(v[1], v[2], x, y), e2 = edge(v[2], v[0], x, y);
    return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
  });
}

Coverage render_bar(std::size_t size, double cx, double cy, double length, double thickness,
                    double angle) {
  const double ux = std::cos(angle), uy = std::sin(angle);
  return rasterize(size, bounds_of(bar_corners(cx, cy, length, thickness, angle)),
                   [=](double x, double y) {
                     const double dx = x - cx, dy = y - cy;
                     return std::abs(dx * ux + dy * uy) <= 0.5 * length &&
                            std::abs(-dx * uy + dy * ux) <= 0.5 * thickness;
                   });
}

DetectionInstance generate_instance(const BenchConfig& cfg, std::uint64_t image_seed) {
  if (cfg.image_size < 32) throw std::invalid_argument("bench image_size must be at least 32");
  if (cfg.min_shapes == 0 || cfg.max_shapes < cfg.min_shapes) {
    throw std::invalid_argument("bench shape count range is empty or allows zero shapes");
  }
  SplitMix64 rng(image_seed);
  const std::size_t size = cfg.image_size;
  const double lim = static_cast<double>(size);
  DetectionInstance inst;
  inst.image = Tensor({3, size, size});

  std::array<double, 3> bg;
  for (auto& c : bg) c = rng.uniform(0.0, 1.0);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::size_t i = 0; i < size * size; ++i) {
      inst.image[ch * size * size + i] = std::clamp(bg[ch] + rng.normal(0.0, cfg.noise), 0.0, 1.0);
    }
  }

  // Object scale relative to the default 64px canvas.
  const double scale = lim / 64.0;
  const std::size_t n_shapes = cfg.min_shapes + rng.below(cfg.max_shapes - cfg.min_shapes + 1);
  for (std::size_t s = 0; s < n_shapes; ++s) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const int label = 1 + static_cast<int>(rng.below(kNumShapeClasses));
      const double angle = rng.uniform(0.0, std::numbers::pi);
      double p1 = 0.0, p2 = 0.0;
      Box rel;  // box relative to a centre at the origin
      switch (static_cast<ShapeClass>(label)) {
        case ShapeClass::disk:
          p1 = rng.uniform(5.0, 12.0) * scale;
          rel = {-p1, -p1, p1, p1};
          break;
        case ShapeClass::triangle:
          p1 = rng.uniform(7.0, 15.0) * scale;
          rel = bounds_of(triangle_vertices(0.0, 0.0, p1, angle));
          break;
        case ShapeClass::bar:
          p1 = rng.uniform(20.0, 36.0) * scale;
          p2 = p1 / rng.uniform(3.0, 5.0);
          rel = bounds_of(bar_corners(0.0, 0.0, p1, p2, angle));
          break;
      }
      const double cx = rng.uniform(-rel.x1, lim - rel.x2);
      const double cy = rng.uniform(-rel.y1, lim - rel.y2);
      const Box box{cx + rel.x1, cy + rel.y1, cx + rel.x2, cy + rel.y2};
      const bool crowded = std::any_of(inst.gt.begin(), inst.gt.end(), [&](const GroundTruth& g) {
        return iou(g.box, box) > cfg.max_overlap;
      });
      // Colour must stand out from the background.
      std::array<double, 3> color;
      double contrast = 0.0;
      for (int tries = 0; tries < 20 && contrast < 0.6; ++tries) {
        contrast = 0.0;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          color[ch] = rng.uniform(0.0, 1.0);
          contrast += std::abs(color[ch] - bg[ch]);
        }
      }
      if (crowded) continue;

      Coverage cov;
      switch (static_cast<ShapeClass>(label)) {
        case ShapeClass::disk: cov = render_disk(size, cx, cy, p1); break;
        case ShapeClass::triangle: cov = render_triangle(size, cx, cy, p1, angle); break;
        case ShapeClass::bar: cov = render_bar(size, cx, cy, p1, p2, angle); break;
      }
      for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t i = 0; i < size * size; ++i) {
          double& px = inst.image[ch * size * size + i];
          px = px * (1.0 - cov.frac[i]) + color[ch] * cov.frac[i];
        }
      }
      inst.gt.push_back({box, label});
      break;
    }
  }

  auto clip = [&](Box b) {
    b.x1 = std::clamp(b.x1, 0.0, lim - 2.0);
    b.y1 = std::clamp(b.y1, 0.0, lim - 2.0);
    b.x2 = std::clamp(b.x2, b.x1 + 2.0, lim);
    b.y2 = std::clamp(b.y2, b.y1 + 2.0, lim);
    return b;
  };
  for (const auto& g : inst.gt) {
    const double w = g.box.width(), h = g.box.height();
    const double cx = 0.5 * (g.box.x1 + g.box.x2), cy = 0.5 * (g.box.y1 + g.box.y2);
    for (std::size_t j = 0; j < cfg.proposals_per_gt; ++j) {
      const double jw = w * rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter);
      const double jh = h * rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter);
      const double jx = cx + w * rng.uniform(-cfg.jitter, cfg.jitter);
      const double jy = cy + h * rng.uniform(-cfg.jitter, cfg.jitter);
      inst.proposals.push_back(to_roi(clip({jx - 0.5 * jw, jy - 0.5 * jh, jx + 0.5 * jw, jy + 0.5 * jh})));
    }
  }
  for (std::size_t j = 0; j < cfg.negatives; ++j) {
    const double w = rng.uniform(8.0, 32.0) * scale, h = rng.uniform(8.0, 32.0) * scale;
    const double x = rng.uniform(0.0, lim - w), y = rng.uniform(0.0, lim - h);
    inst.proposals.push_back(to_roi(clip({x, y, x + w, y + h})));
  }
  return inst;
}

std::vector<DetectionInstance> generate_dataset(const BenchConfig& cfg, std::size_t count,
                                                std::uint64_t seed) {
  std::vector<DetectionInstance> data;
  data.reserve(count);
  for (std::size_t i = 0; i < count; ++i) data.push_back(generate_instance(cfg, derive_seed(seed, i)));
  return data;
}

// ---- evaluation ----------------------------------------------------------------

ApReport evaluate_map(std::span<const std::vector<Detection>> detections,
                      std::span<const std::vector<GroundTruth>> ground_truth,
                      std::size_t num_fg_classes, double iou_thresh) {
  if (detections.size() != ground_truth.size()) {
    throw std::invalid_argument("evaluate_map: detection and ground-truth image counts differ");
  }
  ApReport report;
  double ap_sum = 0.0;
  std::size_t ap_count = 0;
  for (std::size_t c = 1; c <= num_fg_classes; ++c) {
    const int label = static_cast<int>(c);
    struct Ranked {
      std::size_t image;
      const Detection* det;
    };
    std::vector<Ranked> ranked;
    std::size_t n_pos = 0;
    std::vector<std::vector<char>> matched(ground_truth.size());
    for (std::size_t i = 0; i < ground_truth.size(); ++i) {
      matched[i].assign(ground_truth[i].size(), 0);
      for (const auto& g : ground_truth[i]) n_pos += g.label == label;
      for (const auto& d : detections[i]) {
        if (d.label == label) ranked.push_back({i, &d});
      }
    }
    if (n_pos == 0) {
      report.per_class_ap.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Ranked& a, const Ranked& b) { return a.det->score > b.det->score; });

    std::vector<double> recall, precision;
    std::size_t tp = 0, fp = 0;
    for (const auto& r : ranked) {
      const auto& gts = ground_truth[r.image];
      double best = -1.0;
      std::size_t best_g = gts.size();
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].label != label || matched[r.image][g]) continue;
        const double v = iou(r.det->box, gts[g].box);
        if (v > best) {
          best = v;
          best_g = g;
        }
      }
      if (best_g < gts.size() && best >= iou_thresh) {
        matched[r.image][best_g] = 1;
        ++tp;
      } else {
        ++fp;
      }
      recall.push_back(static_cast<double>(tp) / static_cast<double>(n_pos));
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }

    // All-points interpolation over the precision envelope.
    std::vector<double> mrec{0.0}, mpre{0.0};
    mrec.insert(mrec.end(), recall.begin(), recall.end());
    mpre.insert(mpre.end(), precision.begin(), precision.end());
    mrec.push_back(1.0);
    mpre.push_back(0.0);
    for (std::size_t i = mpre.size() - 1; i-- > 0;) mpre[i] = std::max(mpre[i], mpre[i + 1]);
    double ap = 0.0;
    for (std::size_t i = 1; i < mrec.size(); ++i) {
      if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
    }
    report.per_class_ap.push_back(ap);
    ap_sum += ap;
    ++ap_count;
  }
  report.map = ap_count ? ap_sum / static_cast<double>(ap_count) : 0.0;
  return report;
}

// ---- files ---------------------------------------------------------------------

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm expects a [3,H,W] image");
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P6\n" << w << " " << h << "\n255\n";
  std::string row(3 * w, '\0');
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image(c, y, x), 0.0, 1.0);
        row[3 * x + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
    }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

namespace {

// Next whitespace-separated header token, skipping `#` comments.
std::string ppm_token(std::istream& in) {
  std::string tok;
  char ch = 0;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const std::string magic = ppm_token(in);
  if (magic != "P6" && magic != "P3") throw std::runtime_error(path.string() + ": not a P3/P6 PPM");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(ppm_token(in));
    h = std::stoul(ppm_token(in));
    maxval = std::stoul(ppm_token(in));
  } catch (const std::exception&) {
    throw std::runtime_error(path.string() + ": malformed PPM header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) {
    throw std::runtime_error(path.string() + ": unsupported PPM dimensions or depth");
  }
  Tensor img({3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        std::size_t v = 0;
        if (magic == "P6") {
          char byte = 0;
          if (!in.get(byte)) throw std::runtime_error(path.string() + ": truncated pixel data");
          v = static_cast<unsigned char>(byte);
        } else {
          const std::string tok = ppm_token(in);
          if (tok.empty()) throw std::runtime_error(path.string() + ": truncated pixel data");
          v = std::stoul(tok);
        }
        img(c, y, x) = static_cast<double>(v) / static_cast<double>(maxval);
      }
    }
  }
  return img;
}

void export_dataset(const std::filesystem::path& dir, std::span<const DetectionInstance> data) {
  std::filesystem::create_directories(dir);
  std::ofstream ann(dir / "annotations.txt", std::ios::trunc);
  if (!ann) throw std::runtime_error("cannot write annotations in " + dir.string());
  char name[32];
  char line[160];
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::snprintf(name, sizeof name, "%05zu.ppm", i);
    write_ppm(dir / name, data[i].image);
    for (const auto& g : data[i].gt) {
      std::snprintf(line, sizeof line, "%zu %d %.3f %.3f %.3f %.3f\n", i, g.label, g.box.x1, g.box.y1,
                    g.box.x2, g.box.y2);
      ann << line;
    }
  }
}

}  // namespace regionlets
