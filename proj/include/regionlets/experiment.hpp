#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "regionlets/bench.hpp"
#include "regionlets/config.hpp"
#include "regionlets/detector.hpp"

namespace regionlets {

struct LrStep {
  std::size_t iteration = 0;  // first iteration the rate applies to
  double lr = 0.0;
};

/// "0:1e-3, 2500:1e-4". Iterations must start at 0 and strictly increase; rates must be positive.
std::vector<LrStep> parse_lr_schedule(std::string_view text);
std::string format_lr_schedule(const std::vector<LrStep>& schedule);
double lr_at(const std::vector<LrStep>& schedule, std::size_t iteration);

struct DataConfig {
  BenchConfig bench;
  std::size_t train_images = 500;
  std::size_t val_images = 100;
  std::uint64_t train_seed = 1000;
  std::uint64_t val_seed = 2000;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_images = 4;
  std::vector<LrStep> schedule{{0, 0.02}, {2500, 0.002}};
  double momentum = 0.9;
  std::size_t train_eval_images = 100;  // leading train images scored for the train mAP column
};

struct ExperimentConfig {
  DetectorConfig detector;
  DataConfig data;
  TrainConfig train;
  std::uint64_t seed = 0;  // parameter init and batch order
  std::filesystem::path output_dir = "runs/default";

  /// Unknown keys throw ConfigError naming the key.
  static ExperimentConfig from_kv(const KeyValueConfig& kv);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Every key with its current value; from_kv(parse(to_text())) round-trips.
  std::string to_text() const;
  void validate() const;
};

/// All accepted config keys.
const std::vector<std::string>& experiment_keys();

// ---- training ------------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  double cls_loss = 0.0;  // mean over the epoch's iterations
  double reg_loss = 0.0;
  double train_map = 0.0;
  double val_map = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  DetectorParams params;
};

/// Per-epoch progress callback (epoch metrics, wall seconds for the epoch).
using EpochCallback = std::function<void(const EpochMetrics&, double)>;

/// Trains from scratch and writes into cfg.output_dir:
///   config.txt    the resolved configuration
///   metrics.csv   `# schema v1` then epoch,cls_loss,reg_loss,train_map,val_map
///   timing.csv    `# schema v1` then epoch,wall_seconds
///   model.ckpt    final parameters
/// A non-finite loss writes diagnostics.txt and rethrows NumericError.
TrainResult train(const ExperimentConfig& cfg, const EpochCallback& on_epoch = {});

/// One momentum-SGD update of every tensor in `params`.
void sgd_update(DetectorParams& params, const DetectorParams& grads, double lr, double momentum,
                DetectorParams& velocity);

std::string format_metrics_row(const EpochMetrics& m);
inline constexpr std::string_view kMetricsHeader = "epoch,cls_loss,reg_loss,train_map,val_map";
std::vector<EpochMetrics> read_metrics(const std::filesystem::path& csv);

/// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);

// ---- evaluation ----------------------------------------------------------------

struct EvalReport {
  ApReport at_50;
  ApReport at_70;
  std::size_t images = 0;
  std::size_t detections = 0;
};

EvalReport evaluate(const DetectorParams& params, const DetectorConfig& cfg,
                    std::span<const DetectionInstance> data);

/// Mean AP at IoU 0.5 over `data`.
double evaluate_map50(const DetectorParams& params, const DetectorConfig& cfg,
                      std::span<const DetectionInstance> data);

/// Loads config.txt and model.ckpt from a train output directory.
struct TrainedModel {
  ExperimentConfig cfg;
  DetectorParams params;
};
TrainedModel load_run(const std::filesystem::path& run_dir);

// ---- ablation and sweep ----------------------------------------------------------

/// Caps worker threads: REGIONLET_THREADS if set, else the hardware concurrency.
std::size_t worker_threads();

/// Runs `jobs` on up to `threads` workers. The first exception is rethrown after all finish.
void run_parallel(std::vector<std::function<void()>> jobs, std::size_t threads);

inline constexpr std::string_view kAblationVariants[] = {"global", "offset-only", "non-gating", "full"};

/// `base` with the named ablation applied.
ExperimentConfig ablation_variant(const ExperimentConfig& base, std::string_view variant);

struct VariantStats {
  std::string variant;
  std::vector<double> val_map;  // one per seed
  double mean = 0.0;
  double sd = 0.0;              // sample standard deviation
};

struct AblationResult {
  std::vector<VariantStats> variants;  // kAblationVariants order
  bool chain_holds = false;            // full >= non-gating >= offset-only
  bool beats_global = false;           // every other variant >= global + margin
  bool full_beats_offset = false;      // full >= offset-only
  bool passed = false;                 // beats_global && full_beats_offset
  const VariantStats& get(std::string_view variant) const;
};

inline constexpr double kGlobalMargin = 0.1;

/// Trains every variant for `seeds` seeds (base.seed, base.seed + 1, ...) under
/// base.output_dir/ablate/<variant>/seed<k>. Runs whose model.ckpt and complete
/// metrics.csv already exist with the same config are reused.
AblationResult ablate(const ExperimentConfig& base, std::size_t seeds = 3, std::size_t threads = 1);
AblationResult summarize_ablation(std::vector<VariantStats> variants);
std::string format_ablation_table(const AblationResult& result);

inline constexpr std::size_t kSweepRegions[] = {4, 9, 16};
inline constexpr std::size_t kSweepDensities[] = {2, 3, 4, 5, 6};

struct SweepCell {
  std::size_t num_regions = 0;
  std::size_t density = 0;
  double val_map = 0.0;
};

/// Trains every (num_regions, density x density) cell under base.output_dir/sweep and
/// appends a row to sweep.csv as each finishes. Cells already in sweep.csv are skipped,
/// so an interrupted sweep resumes where it stopped. Writes sweep_matrix.csv at the end.
std::vector<SweepCell> sweep(const ExperimentConfig& base, std::size_t threads = 1,
                             std::span<const std::size_t> regions = kSweepRegions,
                             std::span<const std::size_t> densities = kSweepDensities);
std::vector<SweepCell> read_sweep(const std::filesystem::path& csv);

}  // namespace regionlets
