#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "regionlets/bench.hpp"
#include "test_util.hpp"

using namespace regionlets;

namespace {

double coverage_area(const Coverage& c) {
  double s = 0.0;
  for (double f : c.frac) s += f;
  return s;
}

}  // namespace

TEST_SUITE("bench") {
  TEST_CASE("generation is a pure function of the seed") {
    const BenchConfig cfg;
    const auto a = generate_dataset(cfg, 6, 31);
    const auto b = generate_dataset(cfg, 6, 31);
    const auto c = generate_dataset(cfg, 6, 32);
    REQUIRE(a.size() == 6);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].image == b[i].image);
      CHECK(a[i].gt.size() == b[i].gt.size());
      CHECK(a[i].proposals.size() == b[i].proposals.size());
      for (std::size_t j = 0; j < a[i].gt.size(); ++j) CHECK(a[i].gt[j].box == b[i].gt[j].box);
      for (std::size_t j = 0; j < a[i].proposals.size(); ++j) CHECK(a[i].proposals[j] == b[i].proposals[j]);
      differs = differs || !(a[i].image == c[i].image);
    }
    CHECK(differs);
    // Image i depends only on its derived seed.
    CHECK(generate_instance(cfg, derive_seed(31, 4)).image == a[4].image);
  }

  TEST_CASE("instance invariants") {
    BenchConfig cfg;
    const auto data = generate_dataset(cfg, 40, 5);
    std::size_t classes_seen[4] = {};
    for (const auto& inst : data) {
      CHECK(inst.image.shape() == Shape{3, 64, 64});
      for (double v : inst.image.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      CHECK(inst.gt.size() >= 1);
      CHECK(inst.gt.size() <= 3);
      CHECK(inst.proposals.size() >= 1);
      for (const auto& g : inst.gt) {
        CHECK(g.box.x1 >= 0.0);
        CHECK(g.box.y1 >= 0.0);
        CHECK(g.box.x2 <= 64.0);
        CHECK(g.box.y2 <= 64.0);
        CHECK(g.label >= 1);
        CHECK(g.label <= kNumShapeClasses);
        ++classes_seen[g.label];
      }
      for (const auto& p : inst.proposals) {
        CHECK(p.width > 0.0);
        CHECK(p.height > 0.0);
      }
    }
    for (int c = 1; c <= kNumShapeClasses; ++c) CHECK(classes_seen[c] > 0);

    cfg.min_shapes = cfg.max_shapes = 1;
    for (const auto& inst : generate_dataset(cfg, 20, 6)) CHECK(inst.gt.size() == 1);
  }

  TEST_CASE("rendered areas") {
    for (double r : {5.0, 8.5, 12.0}) {
      const double area = coverage_area(render_disk(64, 31.3, 30.6, r));
      CHECK(std::abs(area - std::numbers::pi * r * r) <= 0.1 * std::numbers::pi * r * r);
    }
    // Bar: length x thickness; triangle: (3 sqrt 3 / 4) R^2.
    const double bar = coverage_area(render_bar(64, 32, 32, 30, 7, 0.6));
    CHECK(std::abs(bar - 210.0) <= 21.0);
    const double tri = coverage_area(render_triangle(64, 32, 32, 12, 0.3));
    const double tri_area = 3.0 * std::sqrt(3.0) / 4.0 * 144.0;
    CHECK(std::abs(tri - tri_area) <= 0.1 * tri_area);
    const Coverage bounds = render_bar(64, 32, 32, 30, 6, 0.0);
    CHECK(bounds.bounds.width() / bounds.bounds.height() >= 3.0);
  }

  TEST_CASE("mAP basics") {
    const std::vector<std::vector<GroundTruth>> gt{{{{0, 0, 10, 10}, 1}}};
    const std::vector<std::vector<Detection>> hit{{{{1, 0, 11, 10}, 1, 0.9}}};
    const auto r = evaluate_map(hit, gt, 3);
    CHECK(r.per_class_ap[0] == 1.0);
    CHECK(std::isnan(r.per_class_ap[1]));
    CHECK(r.map == 1.0);
    const std::vector<std::vector<Detection>> none{{}};
    CHECK(evaluate_map(none, gt, 3).map == 0.0);
    const std::vector<std::vector<Detection>> wrong_class{{{{0, 0, 10, 10}, 2, 0.9}}};
    CHECK(evaluate_map(wrong_class, gt, 3).map == 0.0);
    CHECK_THROWS(evaluate_map(hit, std::vector<std::vector<GroundTruth>>{}, 3));
  }

  TEST_CASE("hand PR curve") {
    // Ranked: TP, FP, TP against two GTs. Recall 0.5 at precision 1, recall 1 at 2/3.
    const std::vector<std::vector<GroundTruth>> gt{{{{0, 0, 10, 10}, 1}, {{20, 20, 30, 30}, 1}}};
    const std::vector<std::vector<Detection>> dets{
        {{{0, 0, 10, 10}, 1, 0.9}, {{40, 40, 50, 50}, 1, 0.8}, {{20, 20, 30, 30}, 1, 0.7}}};
    CHECK(evaluate_map(dets, gt, 1).map == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0).epsilon(1e-12));
  }

  TEST_CASE("duplicates count once and mAP falls with the IoU threshold") {
    const std::vector<std::vector<GroundTruth>> gt{{{{0, 0, 10, 10}, 1}}};
    const std::vector<std::vector<Detection>> dup{{{{0, 0, 10, 10}, 1, 0.9}, {{0, 0, 10, 10}, 1, 0.8}}};
    CHECK(evaluate_map(dup, gt, 1).map == 1.0);
    const std::vector<std::vector<Detection>> dup_first{{{{0, 0, 10, 10}, 1, 0.8}, {{0, 0, 10, 10}, 1, 0.9}}};
    CHECK(evaluate_map(dup_first, gt, 1).map == 1.0);
    const std::vector<std::vector<Detection>> ranked_fp{{{{30, 30, 40, 40}, 1, 0.95}, {{0, 0, 10, 10}, 1, 0.5}}};
    CHECK(evaluate_map(ranked_fp, gt, 1).map == 0.5);

    SplitMix64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::vector<GroundTruth>> g(3);
      std::vector<std::vector<Detection>> d(3);
      for (std::size_t i = 0; i < 3; ++i) {
        for (int k = 0; k < 2; ++k) {
          const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
          const int label = 1 + static_cast<int>(rng.below(3));
          g[i].push_back({{x, y, x + 15, y + 15}, label});
          for (int j = 0; j < 3; ++j) {
            const double dx = rng.uniform(-5, 5), dy = rng.uniform(-5, 5);
            d[i].push_back({{x + dx, y + dy, x + dx + 15, y + dy + 15}, label, rng.uniform()});
          }
        }
      }
      double prev = 2.0;
      for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
        const double m = evaluate_map(d, g, 3, t).map;
        CHECK(m >= 0.0);
        CHECK(m <= 1.0);
        CHECK(m <= prev);
        prev = m;
      }
    }
  }

  TEST_CASE("PPM and dataset export") {
    const auto dir = regionlets::testing::scratch_dir("bench-export");
    const auto data = generate_dataset({}, 2, 3);
    write_ppm(dir / "a.ppm", data[0].image);
    const Tensor back = read_ppm(dir / "a.ppm");
    REQUIRE(back.shape() == data[0].image.shape());
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(std::abs(back[i] - data[0].image[i]) <= 0.5 / 255.0 + 1e-12);
    {
      std::ofstream p3(dir / "b.ppm");
      p3 << "P3\n# comment\n2 1\n255\n255 0 0  0 0 255\n";
    }
    const Tensor b = read_ppm(dir / "b.ppm");
    CHECK(b(0, 0, 0) == 1.0);
    CHECK(b(2, 0, 1) == 1.0);
    CHECK(b(1, 0, 0) == 0.0);
    CHECK_THROWS(read_ppm(dir / "missing.ppm"));

    export_dataset(dir / "set", data);
    std::ifstream ann(dir / "set" / "annotations.txt");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(ann, line)) {
      std::istringstream in(line);
      std::size_t idx;
      int label;
      double x1, y1, x2, y2;
      CHECK(static_cast<bool>(in >> idx >> label >> x1 >> y1 >> x2 >> y2));
      CHECK(idx < 2);
      ++lines;
    }
    CHECK(lines == data[0].gt.size() + data[1].gt.size());
    CHECK(std::filesystem::exists(dir / "set" / "00000.ppm"));
  }
}
