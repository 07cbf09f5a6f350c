#include "regionlets/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "regionlets/checkpoint.hpp"
#include "regionlets/rng.hpp"

namespace regionlets {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (true) {
    const auto next = text.find(sep, pos);
    parts.push_back(trim(text.substr(pos, next == std::string_view::npos ? text.npos : next - pos)));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return parts;
}

std::size_t parse_count(const std::string& key, const std::string& text) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("config key " + key + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

// "4" or "4x3" (height x width).
std::pair<std::size_t, std::size_t> parse_extent(const std::string& key, const std::string& text) {
  const auto parts = split(text, 'x');
  if (parts.size() == 1) {
    const auto n = parse_count(key, parts[0]);
    return {n, n};
  }
  if (parts.size() == 2) return {parse_count(key, parts[0]), parse_count(key, parts[1])};
  throw ConfigError("config key " + key + ": expected N or HxW, got '" + text + "'");
}

std::string format_extent(std::size_t h, std::size_t w) {
  return h == w ? std::to_string(h) : std::to_string(h) + "x" + std::to_string(w);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<std::vector<GroundTruth>> ground_truth_of(std::span<const DetectionInstance> data) {
  std::vector<std::vector<GroundTruth>> gt;
  gt.reserve(data.size());
  for (const auto& inst : data) gt.push_back(inst.gt);
  return gt;
}

std::vector<Tensor*> tensor_list(DetectorParams& p) {
  std::vector<Tensor*> out;
  p.for_each([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

void write_diagnostics(const std::filesystem::path& path, const NumericError& err, std::size_t epoch,
                       std::size_t iteration, double lr, std::span<const std::size_t> images,
                       const DetectorParams& params) {
  std::ofstream out(path);
  out << "error: " << err.what() << "\n"
      << "epoch: " << epoch << "\n"
      << "iteration: " << iteration << "\n"
      << "lr: " << format_double(lr) << "\n"
      << "batch images:";
  for (auto i : images) out << ' ' << i;
  out << "\n\nparameter norms (name, l2, finite):\n";
  params.for_each([&](const std::string& name, const Tensor& t) {
    double sq = 0.0;
    for (double v : t.values()) sq += v * v;
    out << name << ' ' << format_double(std::sqrt(sq)) << ' ' << (t.all_finite() ? "yes" : "no") << "\n";
  });
}

}  // namespace

// ---- schedule ------------------------------------------------------------------

std::vector<LrStep> parse_lr_schedule(std::string_view text) {
  std::vector<LrStep> schedule;
  for (const auto& item : split(text, ',')) {
    const auto parts = split(item, ':');
    if (parts.size() != 2) throw ConfigError("train.lr_schedule: expected iteration:lr, got '" + item + "'");
    LrStep step;
    step.iteration = parse_count("train.lr_schedule", parts[0]);
    try {
      std::size_t used = 0;
      step.lr = std::stod(parts[1], &used);
      if (used != parts[1].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError("train.lr_schedule: bad learning rate '" + parts[1] + "'");
    }
    schedule.push_back(step);
  }
  if (schedule.empty() || schedule.front().iteration != 0) {
    throw ConfigError("train.lr_schedule must start at iteration 0");
  }
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (!(schedule[i].lr > 0.0) || !std::isfinite(schedule[i].lr)) {
      throw ConfigError("train.lr_schedule: learning rates must be positive");
    }
    if (i > 0 && schedule[i].iteration <= schedule[i - 1].iteration) {
      throw ConfigError("train.lr_schedule: iterations must strictly increase");
    }
  }
  return schedule;
}

std::string format_lr_schedule(const std::vector<LrStep>& schedule) {
  std::string out;
  for (const auto& s : schedule) {
    if (!out.empty()) out += ", ";
    out += std::to_string(s.iteration) + ":" + format_double(s.lr);
  }
  return out;
}

double lr_at(const std::vector<LrStep>& schedule, std::size_t iteration) {
  if (schedule.empty()) throw std::invalid_argument("empty learning-rate schedule");
  double lr = schedule.front().lr;
  for (const auto& s : schedule) {
    if (s.iteration <= iteration) lr = s.lr;
  }
  return lr;
}

// ---- config --------------------------------------------------------------------

const std::vector<std::string>& experiment_keys() {
  static const std::vector<std::string> keys{
      "rsn.num_regions",   "rsn.hidden",         "rsn.summary_grid",   "rsn.mode",
      "gate.enabled",      "gate.granularity",   "pool.mode",          "pool.out",
      "head.num_classes",  "head.density",       "head.fc_hidden",     "head.nms_iou",
      "head.score_thresh", "head.lambda_reg",    "head.fg_iou",        "backbone.channels",
      "bench.image_size",  "bench.min_shapes",   "bench.max_shapes",   "bench.jitter",
      "bench.proposals_per_gt", "bench.negatives", "bench.noise",      "bench.max_overlap",
      "bench.train_images", "bench.val_images",  "bench.train_seed",   "bench.val_seed",
      "train.epochs",      "train.batch_images", "train.lr_schedule",  "train.momentum",
      "train.eval_images", "seed",               "output_dir"};
  return keys;
}

ExperimentConfig ExperimentConfig::from_kv(const KeyValueConfig& kv) {
  const auto& keys = experiment_keys();
  kv.require_known(std::set<std::string>(keys.begin(), keys.end()));

  ExperimentConfig c;
  auto& d = c.detector;
  d.rsn.num_regions = kv.get_size("rsn.num_regions", d.rsn.num_regions);
  d.rsn.hidden = kv.get_size("rsn.hidden", d.rsn.hidden);
  d.rsn.summary_grid = kv.get_size("rsn.summary_grid", d.rsn.summary_grid);
  d.rsn.mode = parse_rsn_mode(kv.get_string("rsn.mode", std::string(to_string(d.rsn.mode))));
  d.gate.enabled = kv.get_bool("gate.enabled", d.gate.enabled);
  d.gate.granularity =
      parse_gate_granularity(kv.get_string("gate.granularity", std::string(to_string(d.gate.granularity))));
  d.pool.mode = parse_pool_mode(kv.get_string("pool.mode", std::string(to_string(d.pool.mode))));
  if (kv.contains("pool.out")) {
    std::tie(d.pool.out_h, d.pool.out_w) = parse_extent("pool.out", kv.get_string("pool.out", ""));
  }
  d.head.num_classes = kv.get_size("head.num_classes", d.head.num_classes);
  if (kv.contains("head.density")) {
    std::tie(d.head.density_h, d.head.density_w) = parse_extent("head.density", kv.get_string("head.density", ""));
  }
  d.head.fc_hidden = kv.get_size("head.fc_hidden", d.head.fc_hidden);
  d.head.nms_iou = kv.get_double("head.nms_iou", d.head.nms_iou);
  d.head.score_thresh = kv.get_double("head.score_thresh", d.head.score_thresh);
  d.head.lambda_reg = kv.get_double("head.lambda_reg", d.head.lambda_reg);
  d.head.fg_iou = kv.get_double("head.fg_iou", d.head.fg_iou);
  if (kv.contains("backbone.channels")) {
    const auto parts = split(kv.get_string("backbone.channels", ""), ',');
    if (parts.size() != 3) throw ConfigError("config key backbone.channels: expected three counts");
    for (std::size_t i = 0; i < 3; ++i) d.backbone_channels[i] = parse_count("backbone.channels", parts[i]);
  }

  auto& b = c.data.bench;
  b.image_size = kv.get_size("bench.image_size", b.image_size);
  b.min_shapes = kv.get_size("bench.min_shapes", b.min_shapes);
  b.max_shapes = kv.get_size("bench.max_shapes", b.max_shapes);
  b.jitter = kv.get_double("bench.jitter", b.jitter);
  b.proposals_per_gt = kv.get_size("bench.proposals_per_gt", b.proposals_per_gt);
  b.negatives = kv.get_size("bench.negatives", b.negatives);
  b.noise = kv.get_double("bench.noise", b.noise);
  b.max_overlap = kv.get_double("bench.max_overlap", b.max_overlap);
  c.data.train_images = kv.get_size("bench.train_images", c.data.train_images);
  c.data.val_images = kv.get_size("bench.val_images", c.data.val_images);
  c.data.train_seed = static_cast<std::uint64_t>(kv.get_size("bench.train_seed", c.data.train_seed));
  c.data.val_seed = static_cast<std::uint64_t>(kv.get_size("bench.val_seed", c.data.val_seed));

  c.train.epochs = kv.get_size("train.epochs", c.train.epochs);
  c.train.batch_images = kv.get_size("train.batch_images", c.train.batch_images);
  if (kv.contains("train.lr_schedule")) c.train.schedule = parse_lr_schedule(kv.get_string("train.lr_schedule", ""));
  c.train.momentum = kv.get_double("train.momentum", c.train.momentum);
  c.train.train_eval_images = kv.get_size("train.eval_images", c.train.train_eval_images);
  c.seed = static_cast<std::uint64_t>(kv.get_size("seed", c.seed));
  c.output_dir = kv.get_string("output_dir", c.output_dir.string());
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return from_kv(KeyValueConfig::load(path));
}

std::string ExperimentConfig::to_text() const {
  const auto& d = detector;
  const auto& b = data.bench;
  std::ostringstream o;
  o << "rsn.num_regions = " << d.rsn.num_regions << "\n"
    << "rsn.hidden = " << d.rsn.hidden << "\n"
    << "rsn.summary_grid = " << d.rsn.summary_grid << "\n"
    << "rsn.mode = " << to_string(d.rsn.mode) << "\n"
    << "gate.enabled = " << (d.gate.enabled ? "true" : "false") << "\n"
    << "gate.granularity = " << to_string(d.gate.granularity) << "\n"
    << "pool.mode = " << to_string(d.pool.mode) << "\n"
    << "pool.out = " << format_extent(d.pool.out_h, d.pool.out_w) << "\n"
    << "head.num_classes = " << d.head.num_classes << "\n"
    << "head.density = " << format_extent(d.head.density_h, d.head.density_w) << "\n"
    << "head.fc_hidden = " << d.head.fc_hidden << "\n"
    << "head.nms_iou = " << format_double(d.head.nms_iou) << "\n"
    << "head.score_thresh = " << format_double(d.head.score_thresh) << "\n"
    << "head.lambda_reg = " << format_double(d.head.lambda_reg) << "\n"
    << "head.fg_iou = " << format_double(d.head.fg_iou) << "\n"
    << "backbone.channels = " << d.backbone_channels[0] << "," << d.backbone_channels[1] << ","
    << d.backbone_channels[2] << "\n"
    << "bench.image_size = " << b.image_size << "\n"
    << "bench.min_shapes = " << b.min_shapes << "\n"
    << "bench.max_shapes = " << b.max_shapes << "\n"
    << "bench.jitter = " << format_double(b.jitter) << "\n"
    << "bench.proposals_per_gt = " << b.proposals_per_gt << "\n"
    << "bench.negatives = " << b.negatives << "\n"
    << "bench.noise = " << format_double(b.noise) << "\n"
    << "bench.max_overlap = " << format_double(b.max_overlap) << "\n"
    << "bench.train_images = " << data.train_images << "\n"
    << "bench.val_images = " << data.val_images << "\n"
    << "bench.train_seed = " << data.train_seed << "\n"
    << "bench.val_seed = " << data.val_seed << "\n"
    << "train.epochs = " << train.epochs << "\n"
    << "train.batch_images = " << train.batch_images << "\n"
    << "train.lr_schedule = " << format_lr_schedule(train.schedule) << "\n"
    << "train.momentum = " << format_double(train.momentum) << "\n"
    << "train.eval_images = " << train.train_eval_images << "\n"
    << "seed = " << seed << "\n"
    << "output_dir = " << output_dir.string() << "\n";
  return o.str();
}

void ExperimentConfig::validate() const {
  detector.validate();
  if (detector.head.num_classes != static_cast<std::size_t>(kNumShapeClasses) + 1) {
    throw ConfigError("head.num_classes must be " + std::to_string(kNumShapeClasses + 1) +
                      " (background plus the benchmark's shape classes)");
  }
  const auto& b = data.bench;
  if (b.image_size < 16) throw ConfigError("bench.image_size must be at least 16");
  if (b.min_shapes == 0 || b.min_shapes > b.max_shapes) {
    throw ConfigError("bench.min_shapes must be in [1, bench.max_shapes]");
  }
  if (!(b.jitter >= 0.0 && b.jitter < 1.0)) throw ConfigError("bench.jitter must be in [0,1)");
  if (!(b.noise >= 0.0)) throw ConfigError("bench.noise must be non-negative");
  if (!(b.max_overlap >= 0.0 && b.max_overlap <= 1.0)) throw ConfigError("bench.max_overlap must be in [0,1]");
  if (b.proposals_per_gt + b.negatives == 0) throw ConfigError("bench needs at least one proposal per image");
  if (data.train_images == 0) throw ConfigError("bench.train_images must be positive");
  if (data.val_images == 0) throw ConfigError("bench.val_images must be positive");
  if (train.batch_images == 0) throw ConfigError("train.batch_images must be positive");
  if (!(train.momentum >= 0.0 && train.momentum < 1.0)) throw ConfigError("train.momentum must be in [0,1)");
  parse_lr_schedule(format_lr_schedule(train.schedule));
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

// ---- training ------------------------------------------------------------------

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string format_metrics_row(const EpochMetrics& m) {
  return std::to_string(m.epoch) + "," + format_double(m.cls_loss) + "," + format_double(m.reg_loss) + "," +
         format_double(m.train_map) + "," + format_double(m.val_map);
}

std::vector<EpochMetrics> read_metrics(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw std::runtime_error("cannot read " + csv.string());
  std::vector<EpochMetrics> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line == kMetricsHeader) continue;
    const auto f = split(line, ',');
    if (f.size() != 5) throw std::runtime_error("malformed metrics row: " + line);
    EpochMetrics m;
    m.epoch = parse_count("epoch", f[0]);
    m.cls_loss = std::stod(f[1]);
    m.reg_loss = std::stod(f[2]);
    m.train_map = std::stod(f[3]);
    m.val_map = std::stod(f[4]);
    rows.push_back(m);
  }
  return rows;
}

void sgd_update(DetectorParams& params, const DetectorParams& grads, double lr, double momentum,
                DetectorParams& velocity) {
  auto p = tensor_list(params);
  auto v = tensor_list(velocity);
  auto g = tensor_list(const_cast<DetectorParams&>(grads));
  if (p.size() != g.size() || p.size() != v.size()) throw ShapeError("sgd_update: parameter layouts differ");
  // Validate everything first so a bad gradient leaves the model untouched.
  for (std::size_t i = 0; i < g.size(); ++i) require_finite(*g[i], "gradient");
  for (std::size_t i = 0; i < p.size(); ++i) sgd_step(*p[i], *g[i], lr, momentum, *v[i]);
}

TrainResult train(const ExperimentConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  const auto& dir = cfg.output_dir;
  std::filesystem::create_directories(dir);
  write_file(dir / "config.txt", cfg.to_text());

  const auto train_set = generate_dataset(cfg.data.bench, cfg.data.train_images, cfg.data.train_seed);
  const auto val_set = generate_dataset(cfg.data.bench, cfg.data.val_images, cfg.data.val_seed);
  const std::span<const DetectionInstance> train_eval(
      train_set.data(), std::min(cfg.train.train_eval_images, train_set.size()));

  TrainResult result;
  result.params = init_detector(cfg.detector, derive_seed(cfg.seed, 0));
  DetectorParams velocity = result.params.zeros_like();
  DetectorParams grads = result.params.zeros_like();

  std::ofstream metrics(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
  std::ofstream timing(dir / "timing.csv", std::ios::binary | std::ios::trunc);
  if (!metrics || !timing) throw std::runtime_error("cannot write metrics to " + dir.string());
  metrics << "# schema v1\n" << kMetricsHeader << "\n" << std::flush;
  timing << "# schema v1\nepoch,wall_seconds\n" << std::flush;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t iteration = 0;
  for (std::size_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    SplitMix64 shuffle(derive_seed(cfg.seed, epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double cls_sum = 0.0, reg_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.train.batch_images) {
      const std::size_t last = std::min(order.size(), first + cfg.train.batch_images);
      const std::span<const std::size_t> images(order.data() + first, last - first);
      std::vector<const DetectionInstance*> batch;
      for (auto idx : images) batch.push_back(&train_set[idx]);
      const double lr = lr_at(cfg.train.schedule, iteration);
      try {
        grads.for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
        const LossBreakdown loss = batch_loss(batch, result.params, cfg.detector, &grads);
        sgd_update(result.params, grads, lr, cfg.train.momentum, velocity);
        cls_sum += loss.cls;
        reg_sum += loss.reg;
      } catch (const NumericError& err) {
        write_diagnostics(dir / "diagnostics.txt", err, epoch, iteration, lr, images, result.params);
        throw;
      }
      ++steps;
      ++iteration;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.cls_loss = cls_sum / static_cast<double>(steps);
    m.reg_loss = reg_sum / static_cast<double>(steps);
    m.train_map = evaluate_map50(result.params, cfg.detector, train_eval);
    m.val_map = evaluate_map50(result.params, cfg.detector, val_set);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    metrics << format_metrics_row(m) << "\n" << std::flush;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", seconds);
    timing << epoch << "," << buf << "\n" << std::flush;
    result.epochs.push_back(m);
    if (on_epoch) on_epoch(m, seconds);
  }
  write_checkpoint(dir / "model.ckpt", to_named_tensors(result.params));
  return result;
}

// ---- evaluation ----------------------------------------------------------------

EvalReport evaluate(const DetectorParams& params, const DetectorConfig& cfg,
                    std::span<const DetectionInstance> data) {
  std::vector<std::vector<Detection>> dets;
  dets.reserve(data.size());
  EvalReport report;
  for (const auto& inst : data) {
    dets.push_back(detect(inst, params, cfg));
    report.detections += dets.back().size();
  }
  const auto gt = ground_truth_of(data);
  report.images = data.size();
  report.at_50 = evaluate_map(dets, gt, cfg.head.num_classes - 1, 0.5);
  report.at_70 = evaluate_map(dets, gt, cfg.head.num_classes - 1, 0.7);
  return report;
}

double evaluate_map50(const DetectorParams& params, const DetectorConfig& cfg,
                      std::span<const DetectionInstance> data) {
  std::vector<std::vector<Detection>> dets;
  dets.reserve(data.size());
  for (const auto& inst : data) dets.push_back(detect(inst, params, cfg));
  return evaluate_map(dets, ground_truth_of(data), cfg.head.num_classes - 1, 0.5).map;
}

TrainedModel load_run(const std::filesystem::path& run_dir) {
  TrainedModel m;
  m.cfg = ExperimentConfig::load(run_dir / "config.txt");
  m.params = from_named_tensors(read_checkpoint(run_dir / "model.ckpt"), m.cfg.detector);
  return m;
}

// ---- ablation and sweep ----------------------------------------------------------

std::size_t worker_threads() {
  if (const char* env = std::getenv("REGIONLET_THREADS")) {
    std::size_t n = 0;
    const std::string_view s(env);
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
    if (ec != std::errc() || ptr != s.data() + s.size() || n == 0) {
      throw ConfigError("REGIONLET_THREADS must be a positive integer, got '" + std::string(s) + "'");
    }
    return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void run_parallel(std::vector<std::function<void()>> jobs, std::size_t threads) {
  threads = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        jobs[i]();
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
}

ExperimentConfig ablation_variant(const ExperimentConfig& base, std::string_view variant) {
  ExperimentConfig c = base;
  if (variant == "full") return c;
  if (variant == "non-gating") {
    c.detector.gate.enabled = false;
  } else if (variant == "offset-only") {
    c.detector.rsn.mode = RsnMode::offset_only;
  } else if (variant == "global") {
    c.detector.rsn.mode = RsnMode::global;
    c.detector.rsn.num_regions = 1;
  } else {
    throw ConfigError("unknown ablation variant '" + std::string(variant) + "'");
  }
  return c;
}

namespace {

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double sq = 0.0;
  for (double x : v) sq += (x - m) * (x - m);
  return std::sqrt(sq / static_cast<double>(v.size() - 1));
}

// A finished run with the same resolved config can be reused as is. The output
// directory is ignored so a run reached through another path still matches.
bool run_complete(const ExperimentConfig& cfg) {
  const auto& dir = cfg.output_dir;
  if (!std::filesystem::exists(dir / "model.ckpt")) return false;
  try {
    ExperimentConfig stored = ExperimentConfig::from_kv(KeyValueConfig::parse(read_file(dir / "config.txt")));
    stored.output_dir = cfg.output_dir;
    if (stored.to_text() != cfg.to_text()) return false;
    return read_metrics(dir / "metrics.csv").size() == cfg.train.epochs;
  } catch (const std::exception&) {
    return false;
  }
}

double final_val_map(const ExperimentConfig& cfg) {
  const auto rows = read_metrics(cfg.output_dir / "metrics.csv");
  if (!rows.empty()) return rows.back().val_map;
  // Zero epochs: score the initial checkpoint.
  const auto model = load_run(cfg.output_dir);
  const auto val = generate_dataset(cfg.data.bench, cfg.data.val_images, cfg.data.val_seed);
  return evaluate_map50(model.params, cfg.detector, val);
}

}  // namespace

const VariantStats& AblationResult::get(std::string_view variant) const {
  for (const auto& v : variants) {
    if (v.variant == variant) return v;
  }
  throw std::out_of_range("no ablation variant '" + std::string(variant) + "'");
}

AblationResult summarize_ablation(std::vector<VariantStats> variants) {
  AblationResult r;
  for (auto& v : variants) {
    v.mean = mean_of(v.val_map);
    v.sd = sd_of(v.val_map);
  }
  r.variants = std::move(variants);
  const double full = r.get("full").mean, gating = r.get("non-gating").mean;
  const double offset = r.get("offset-only").mean, global = r.get("global").mean;
  r.chain_holds = full >= gating && gating >= offset;
  r.beats_global = std::min({full, gating, offset}) >= global + kGlobalMargin;
  r.full_beats_offset = full >= offset;
  r.passed = r.beats_global && r.full_beats_offset;
  return r;
}

AblationResult ablate(const ExperimentConfig& base, std::size_t seeds, std::size_t threads) {
  if (seeds == 0) throw std::invalid_argument("ablate: at least one seed is required");
  std::vector<VariantStats> stats;
  std::vector<ExperimentConfig> runs;
  for (auto variant : kAblationVariants) {
    stats.push_back({std::string(variant), std::vector<double>(seeds), 0.0, 0.0});
    for (std::size_t s = 0; s < seeds; ++s) {
      ExperimentConfig c = ablation_variant(base, variant);
      c.seed = base.seed + s;
      c.output_dir = base.output_dir / "ablate" / std::string(variant) / ("seed" + std::to_string(c.seed));
      runs.push_back(std::move(c));
    }
  }
  std::vector<std::function<void()>> jobs;
  for (const auto& c : runs) {
    if (!run_complete(c)) jobs.push_back([&c] { train(c); });
  }
  run_parallel(std::move(jobs), threads);
  for (std::size_t v = 0; v < stats.size(); ++v) {
    for (std::size_t s = 0; s < seeds; ++s) stats[v].val_map[s] = final_val_map(runs[v * seeds + s]);
  }
  AblationResult result = summarize_ablation(std::move(stats));

  std::ofstream csv(base.output_dir / "ablate" / "ablation.csv", std::ios::binary | std::ios::trunc);
  csv << "# schema v1\nvariant,seed,val_map\n";
  for (const auto& v : result.variants) {
    for (std::size_t s = 0; s < v.val_map.size(); ++s) {
      csv << v.variant << "," << base.seed + s << "," << format_double(v.val_map[s]) << "\n";
    }
  }
  write_file(base.output_dir / "ablate" / "summary.txt", format_ablation_table(result));
  return result;
}

std::string format_ablation_table(const AblationResult& r) {
  std::ostringstream o;
  char buf[128];
  o << "variant        mean_val_map   sd       seeds\n";
  for (const auto& v : r.variants) {
    std::snprintf(buf, sizeof buf, "%-14s %.4f         %.4f   %zu\n", v.variant.c_str(), v.mean, v.sd,
                  v.val_map.size());
    o << buf;
  }
  o << "full >= non-gating >= offset-only: " << (r.chain_holds ? "yes" : "no") << "\n"
    << "every variant >= global + " << format_double(kGlobalMargin) << ": " << (r.beats_global ? "yes" : "no") << "\n"
    << "full >= offset-only: " << (r.full_beats_offset ? "yes" : "no") << "\n"
    << "ordering test: " << (r.passed ? "PASS" : "FAIL") << "\n";
  return o.str();
}

std::vector<SweepCell> read_sweep(const std::filesystem::path& csv) {
  std::vector<SweepCell> cells;
  std::ifstream in(csv, std::ios::binary);
  if (!in) return cells;
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string text = buf.str();
  // A final line without its newline was torn by an interrupted run; drop it and recompute.
  text.erase(text.rfind('\n') == std::string::npos ? 0 : text.rfind('\n') + 1);
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty() || line[0] == '#' || line.starts_with("num_regions")) continue;
    const auto f = split(line, ',');
    if (f.size() != 3) continue;
    try {
      cells.push_back({parse_count("num_regions", f[0]), parse_count("density", f[1]), std::stod(f[2])});
    } catch (const std::exception&) {
    }
  }
  return cells;
}

std::vector<SweepCell> sweep(const ExperimentConfig& base, std::size_t threads,
                             std::span<const std::size_t> regions, std::span<const std::size_t> densities) {
  const auto dir = base.output_dir / "sweep";
  std::filesystem::create_directories(dir);
  const auto csv_path = dir / "sweep.csv";
  std::vector<SweepCell> done = read_sweep(csv_path);
  auto find = [&](std::size_t k, std::size_t d) -> const SweepCell* {
    for (const auto& c : done) {
      if (c.num_regions == k && c.density == d) return &c;
    }
    return nullptr;
  };

  // Rewrite the file from the parsed rows so a torn line cannot linger.
  {
    std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
    csv << "# schema v1\nnum_regions,density,val_map\n";
    for (const auto& c : done) {
      csv << c.num_regions << "," << c.density << "," << format_double(c.val_map) << "\n";
    }
  }

  std::mutex csv_mutex;
  std::vector<std::function<void()>> jobs;
  for (auto k : regions) {
    for (auto d : densities) {
      if (find(k, d)) continue;
      jobs.push_back([&, k, d] {
        ExperimentConfig c = base;
        c.detector.rsn.num_regions = k;
        c.detector.head.density_h = c.detector.head.density_w = d;
        c.detector.pool.out_h = c.detector.pool.out_w = 1;
        c.output_dir = dir / ("k" + std::to_string(k) + "_d" + std::to_string(d));
        if (!run_complete(c)) train(c);
        const SweepCell cell{k, d, final_val_map(c)};
        std::lock_guard lock(csv_mutex);
        std::ofstream csv(csv_path, std::ios::binary | std::ios::app);
        csv << cell.num_regions << "," << cell.density << "," << format_double(cell.val_map) << "\n";
        done.push_back(cell);
      });
    }
  }
  run_parallel(std::move(jobs), threads);

  std::vector<SweepCell> grid;
  std::ofstream matrix(dir / "sweep_matrix.csv", std::ios::binary | std::ios::trunc);
  matrix << "# schema v1\nnum_regions";
  for (auto d : densities) matrix << "," << d << "x" << d;
  matrix << "\n";
  for (auto k : regions) {
    matrix << k;
    for (auto d : densities) {
      const SweepCell* c = find(k, d);
      if (!c) throw std::logic_error("sweep cell missing after run");
      grid.push_back(*c);
      matrix << "," << format_double(c->val_map);
    }
    matrix << "\n";
  }
  return grid;
}

}  // namespace regionlets
