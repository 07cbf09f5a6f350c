#include <doctest.h>

#include <atomic>
#include <fstream>
#include <sstream>

#include "regionlets/checkpoint.hpp"
#include "regionlets/experiment.hpp"
#include "test_util.hpp"

using namespace regionlets;

namespace {

ExperimentConfig tiny_experiment(const std::filesystem::path& dir) {
  ExperimentConfig cfg;
  cfg.detector.rsn.num_regions = 4;
  cfg.detector.rsn.hidden = 16;
  cfg.detector.rsn.summary_grid = 2;
  cfg.detector.head.density_h = cfg.detector.head.density_w = 2;
  cfg.detector.head.fc_hidden = 16;
  cfg.detector.backbone_channels = {4, 6, 6};
  cfg.data.train_images = 6;
  cfg.data.val_images = 3;
  cfg.train.epochs = 2;
  cfg.train.batch_images = 2;
  cfg.train.train_eval_images = 3;
  cfg.train.schedule = {{0, 0.01}, {4, 0.001}};
  cfg.output_dir = dir;
  return cfg;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> config_lines(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  std::istringstream in(cfg.to_text());
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST_SUITE("experiment") {
  TEST_CASE("zero epochs write a header-only CSV and the initial checkpoint") {
    const auto dir = regionlets::testing::scratch_dir("train0");
    ExperimentConfig cfg = tiny_experiment(dir);
    cfg.train.epochs = 0;
    train(cfg);
    CHECK(slurp(dir / "metrics.csv") == "# schema v1\n" + std::string(kMetricsHeader) + "\n");
    CHECK(read_checkpoint(dir / "model.ckpt") == to_named_tensors(init_detector(cfg.detector, derive_seed(cfg.seed, 0))));
    CHECK(read_metrics(dir / "metrics.csv").empty());
  }

  TEST_CASE("training is byte-for-byte reproducible") {
    const auto a = regionlets::testing::scratch_dir("train-a");
    const auto b = regionlets::testing::scratch_dir("train-b");
    std::size_t callbacks = 0;
    const TrainResult ra = train(tiny_experiment(a), [&](const EpochMetrics&, double) { ++callbacks; });
    train(tiny_experiment(b));
    CHECK(callbacks == 2);
    CHECK(ra.epochs.size() == 2);
    CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
    CHECK(slurp(a / "model.ckpt") == slurp(b / "model.ckpt"));
    CHECK(std::filesystem::exists(a / "timing.csv"));
    const auto rows = read_metrics(a / "metrics.csv");
    REQUIRE(rows.size() == 2);
    CHECK(rows[1].epoch == 2);
    CHECK(rows[1].cls_loss == ra.epochs[1].cls_loss);

    // A different seed changes the run.
    const auto c = regionlets::testing::scratch_dir("train-c");
    ExperimentConfig other = tiny_experiment(c);
    other.seed = 1;
    train(other);
    CHECK(slurp(a / "model.ckpt") != slurp(c / "model.ckpt"));
  }

  TEST_CASE("eval of a trained run matches its final CSV row") {
    const auto dir = regionlets::testing::scratch_dir("train-eval");
    train(tiny_experiment(dir));
    const TrainedModel m = load_run(dir);
    const auto val = generate_dataset(m.cfg.data.bench, m.cfg.data.val_images, m.cfg.data.val_seed);
    const EvalReport r = evaluate(m.params, m.cfg.detector, val);
    CHECK(r.at_50.map == read_metrics(dir / "metrics.csv").back().val_map);
    CHECK(r.at_70.map <= r.at_50.map);
    CHECK(r.images == 3);
  }

  TEST_CASE("non-finite losses stop training with diagnostics") {
    const auto dir = regionlets::testing::scratch_dir("train-nan");
    ExperimentConfig cfg = tiny_experiment(dir);
    cfg.train.schedule = {{0, 1e150}};
    CHECK_THROWS_AS(train(cfg), NumericError);
    CHECK(std::filesystem::exists(dir / "diagnostics.txt"));
  }

  TEST_CASE("metrics formatting") {
    CHECK(format_double(0.1) == "0.1");
    CHECK(format_double(1.0 / 3.0) == "0.3333333333333333");
    const EpochMetrics m{3, 0.5, 0.25, 0.75, 0.125};
    CHECK(format_metrics_row(m) == "3,0.5,0.25,0.75,0.125");
  }

  TEST_CASE("ablation variants differ only where intended") {
    const ExperimentConfig base;
    const auto full = ablation_variant(base, "full");
    const auto non_gating = ablation_variant(base, "non-gating");
    const auto lines_full = config_lines(full), lines_ng = config_lines(non_gating);
    REQUIRE(lines_full.size() == lines_ng.size());
    std::vector<std::string> diff;
    for (std::size_t i = 0; i < lines_full.size(); ++i) {
      if (lines_full[i] != lines_ng[i]) diff.push_back(lines_ng[i]);
    }
    REQUIRE(diff.size() == 1);
    CHECK(diff[0] == "gate.enabled = false");

    const auto global = ablation_variant(base, "global");
    CHECK(global.detector.rsn.num_regions == 1);
    CHECK(global.detector.rsn.mode == RsnMode::global);
    const auto p = init_detector(global.detector, 0);
    for (std::size_t i = 0; i < 6; ++i) CHECK(p.rsn.head.bias[i] == AffineParams::identity().theta[i]);
    for (double w : p.rsn.head.weights.values()) CHECK(w == 0.0);
    CHECK(ablation_variant(base, "offset-only").detector.rsn.mode == RsnMode::offset_only);
    CHECK_THROWS_AS(ablation_variant(base, "half"), ConfigError);
  }

  TEST_CASE("ablation verdicts") {
    auto stats = [](std::string name, std::vector<double> v) {
      VariantStats s;
      s.variant = std::move(name);
      s.val_map = std::move(v);
      return s;
    };
    const AblationResult good = summarize_ablation({stats("global", {0.2, 0.3, 0.25}), stats("offset-only", {0.6, 0.62, 0.61}),
                                                    stats("non-gating", {0.66, 0.7, 0.68}), stats("full", {0.7, 0.72, 0.71})});
    CHECK(good.get("global").mean == doctest::Approx(0.25));
    CHECK(good.get("global").sd == doctest::Approx(0.05));
    CHECK(good.chain_holds);
    CHECK(good.passed);
    const AblationResult swapped = summarize_ablation({stats("global", {0.2}), stats("offset-only", {0.6}),
                                                       stats("non-gating", {0.72}), stats("full", {0.7})});
    CHECK_FALSE(swapped.chain_holds);
    CHECK(swapped.passed);
    const AblationResult close = summarize_ablation({stats("global", {0.55}), stats("offset-only", {0.6}),
                                                     stats("non-gating", {0.7}), stats("full", {0.71})});
    CHECK_FALSE(close.beats_global);
    CHECK_FALSE(close.passed);
    CHECK(format_ablation_table(good).find("non-gating") != std::string::npos);
  }

  TEST_CASE("sweep resumes from a partial CSV") {
    const auto dir = regionlets::testing::scratch_dir("sweep");
    ExperimentConfig cfg = tiny_experiment(dir);
    cfg.train.epochs = 1;
    const std::size_t regions[] = {4, 9};
    const std::size_t densities[] = {2};
    const auto first = sweep(cfg, 1, regions, densities);
    REQUIRE(first.size() == 2);
    const auto csv = dir / "sweep" / "sweep.csv";
    const std::string complete = slurp(csv);

    // Drop the last row, leave a torn line, and remove that cell's run.
    const auto cut = complete.rfind('\n', complete.size() - 2);
    {
      std::ofstream out(csv, std::ios::binary | std::ios::trunc);
      out << complete.substr(0, cut + 1) << "9,2,0.12";
    }
    std::filesystem::remove_all(dir / "sweep" / "k9_d2");
    const auto kept_run = dir / "sweep" / "k4_d2" / "metrics.csv";
    const auto stamp = std::filesystem::last_write_time(kept_run);
    const auto second = sweep(cfg, 1, regions, densities);
    CHECK(std::filesystem::last_write_time(kept_run) == stamp);
    CHECK(slurp(csv) == complete);
    REQUIRE(second.size() == 2);
    CHECK(second[1].val_map == first[1].val_map);
    CHECK(read_sweep(csv).size() == 2);
    CHECK(std::filesystem::exists(dir / "sweep" / "sweep_matrix.csv"));

    // A moved sweep is still complete at its new path.
    const auto moved = regionlets::testing::scratch_dir("sweep-moved");
    std::filesystem::remove(moved);
    std::filesystem::rename(dir, moved);
    cfg.output_dir = moved;
    const auto moved_run = moved / "sweep" / "k9_d2" / "metrics.csv";
    const auto moved_stamp = std::filesystem::last_write_time(moved_run);
    const auto third = sweep(cfg, 1, regions, densities);
    CHECK(std::filesystem::last_write_time(moved_run) == moved_stamp);
    CHECK(third[1].val_map == first[1].val_map);
  }

  TEST_CASE("parallel runner") {
    std::atomic<int> count{0};
    std::vector<std::function<void()>> jobs;
    for (int i = 0; i < 8; ++i) jobs.emplace_back([&] { ++count; });
    run_parallel(jobs, 3);
    CHECK(count == 8);
    std::vector<std::function<void()>> failing{[] {}, [] { throw std::runtime_error("boom"); }, [] {}};
    CHECK_THROWS_WITH(run_parallel(failing, 2), "boom");
  }
}
