// Command-line front end: train, eval, ablate, sweep, gradcheck, demo-warp, export.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "regionlets/bench.hpp"
#include "regionlets/config.hpp"
#include "regionlets/experiment.hpp"
#include "regionlets/gradcheck.hpp"
#include "regionlets/warp.hpp"

using namespace regionlets;

namespace {

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
  std::string output;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("-c,--config", args.path, "key = value config file (defaults when omitted)");
  cmd->add_option("--set", args.overrides, "override one key, e.g. --set train.epochs=5")->take_all();
  cmd->add_option("-o,--output", args.output, "output directory (overrides output_dir)");
}

ExperimentConfig resolve_config(const ConfigArgs& args) {
  KeyValueConfig kv = args.path.empty() ? KeyValueConfig{} : KeyValueConfig::load(args.path);
  for (const auto& item : args.overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + item + "'");
    auto key = item.substr(0, eq), value = item.substr(eq + 1);
    kv.set(key, value);
  }
  if (!args.output.empty()) kv.set("output_dir", args.output);
  return ExperimentConfig::from_kv(kv);
}

std::vector<double> parse_numbers(const std::string& text, std::size_t expected, const char* what) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const auto item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) {
      throw CLI::ValidationError(what, "expected " + std::to_string(expected) + " comma-separated numbers");
    }
    out.push_back(v);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.size() != expected) {
    throw CLI::ValidationError(what, "expected " + std::to_string(expected) + " values, got " +
                                         std::to_string(out.size()));
  }
  return out;
}

void print_ap(const char* label, const ApReport& r) {
  std::printf("%s mAP %s\n", label, format_double(r.map).c_str());
  for (std::size_t c = 0; c < r.per_class_ap.size(); ++c) {
    std::printf("  %-9s AP %s\n", std::string(shape_name(static_cast<int>(c + 1))).c_str(),
                format_double(r.per_class_ap[c]).c_str());
  }
}

int cmd_train(const ConfigArgs& args) {
  const ExperimentConfig cfg = resolve_config(args);
  std::fprintf(stderr, "training into %s (%zu epochs)\n", cfg.output_dir.string().c_str(), cfg.train.epochs);
  const TrainResult r = train(cfg, [](const EpochMetrics& m, double seconds) {
    std::fprintf(stderr, "epoch %3zu  cls %.4f  reg %.4f  train mAP %.4f  val mAP %.4f  %.1fs\n", m.epoch,
                 m.cls_loss, m.reg_loss, m.train_map, m.val_map, seconds);
  });
  if (!r.epochs.empty()) std::printf("final val mAP@0.5 %s\n", format_double(r.epochs.back().val_map).c_str());
  std::printf("wrote %s\n", (cfg.output_dir / "model.ckpt").string().c_str());
  return 0;
}

int cmd_eval(const std::string& run_dir, long long dataset_seed, std::size_t images) {
  const TrainedModel model = load_run(run_dir);
  const std::uint64_t seed = dataset_seed < 0 ? model.cfg.data.val_seed : static_cast<std::uint64_t>(dataset_seed);
  const std::size_t count = images == 0 ? model.cfg.data.val_images : images;
  const auto data = generate_dataset(model.cfg.data.bench, count, seed);
  const EvalReport r = evaluate(model.params, model.cfg.detector, data);
  std::printf("images %zu  dataset seed %llu  detections %zu\n", r.images, static_cast<unsigned long long>(seed),
              r.detections);
  print_ap("IoU 0.5", r.at_50);
  print_ap("IoU 0.7", r.at_70);
  return 0;
}

int cmd_ablate(const ConfigArgs& args, std::size_t seeds) {
  const ExperimentConfig cfg = resolve_config(args);
  const AblationResult r = ablate(cfg, seeds, worker_threads());
  std::fputs(format_ablation_table(r).c_str(), stdout);
  return r.passed ? 0 : 1;
}

int cmd_sweep(const ConfigArgs& args) {
  const ExperimentConfig cfg = resolve_config(args);
  const auto cells = sweep(cfg, worker_threads());
  std::printf("num_regions");
  for (auto d : kSweepDensities) std::printf("  %zux%zu  ", d, d);
  std::printf("\n");
  std::size_t i = 0;
  for (auto k : kSweepRegions) {
    std::printf("%-11zu", k);
    for (std::size_t j = 0; j < std::size(kSweepDensities); ++j) std::printf("  %.4f", cells[i++].val_map);
    std::printf("\n");
  }
  return 0;
}

int cmd_gradcheck(const std::string& module, std::size_t seeds, double tol, const std::string& csv_path,
                  const std::string& mutation_name) {
  Mutation mutation = Mutation::none;
  if (mutation_name == "scale") mutation = Mutation::scale;
  else if (mutation_name == "flip-sign") mutation = Mutation::flip_sign;
  else if (mutation_name != "none") throw CLI::ValidationError("--mutation", "none|scale|flip-sign");

  std::vector<std::string> modules;
  if (module == "all") modules = gradcheck_modules();
  else modules.push_back(module);

  std::ofstream csv;
  if (!csv_path.empty()) {
    csv.open(csv_path, std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + csv_path);
    csv << "# schema v1\nmodule,seed,argument,worst_index,analytic,numeric,max_rel_error,tolerance,passed\n";
  }
  bool all_passed = true;
  std::printf("%-12s %-6s %-14s %-12s %s\n", "module", "seeds", "max_rel_error", "tolerance", "result");
  for (const auto& m : modules) {
    const double t = tol > 0.0 ? tol : default_tolerance(m);
    const ModuleCheck check = check_module(m, seeds, t, mutation);
    double worst = 0.0;
    for (const auto& r : check.reports) {
      worst = std::max(worst, r.max_rel_error);
      if (csv) {
        csv << m << "," << r.seed << "," << r.argument << "," << r.worst_index << "," << format_double(r.analytic)
            << "," << format_double(r.numeric) << "," << format_double(r.max_rel_error) << "," << format_double(t)
            << "," << (r.passed ? 1 : 0) << "\n";
      }
    }
    std::printf("%-12s %-6zu %-14.3e %-12.1e %s\n", m.c_str(), seeds, worst, t, check.passed ? "PASS" : "FAIL");
    all_passed = all_passed && check.passed;
  }
  return all_passed ? 0 : 1;
}

int cmd_demo_warp(const std::string& input, const std::string& theta_text, std::size_t h, std::size_t w,
                  const std::string& roi_text, const std::string& output) {
  const Tensor image = read_ppm(input);
  const auto t = parse_numbers(theta_text, 6, "--theta");
  AffineParams theta;
  std::copy(t.begin(), t.end(), theta.theta.begin());
  RegionOfInterest roi{0.0, 0.0, static_cast<double>(image.dim(2)), static_cast<double>(image.dim(1))};
  if (!roi_text.empty()) {
    const auto r = parse_numbers(roi_text, 4, "--roi");
    roi = {r[0], r[1], r[2], r[3]};
  }
  const SampleGrid grid = grid_generate(theta, roi, h, w, 1.0);
  write_ppm(output, warp_forward(image, grid).values);
  std::printf("wrote %zux%zu warp of %s to %s\n", h, w, input.c_str(), output.c_str());
  return 0;
}

int cmd_export(const ConfigArgs& args, const std::string& split, const std::string& dir) {
  const ExperimentConfig cfg = resolve_config(args);
  const bool train_split = split == "train";
  if (!train_split && split != "val") throw CLI::ValidationError("--split", "train|val");
  const auto data = generate_dataset(cfg.data.bench, train_split ? cfg.data.train_images : cfg.data.val_images,
                                     train_split ? cfg.data.train_seed : cfg.data.val_seed);
  export_dataset(dir, data);
  std::printf("wrote %zu images to %s\n", data.size(), dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep regionlets detection head on a synthetic shape benchmark"};
  app.require_subcommand(1);

  ConfigArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a detector and write metrics and a checkpoint");
  add_config_options(train_cmd, train_args);

  std::string eval_run;
  long long eval_seed = -1;
  std::size_t eval_images = 0;
  auto* eval_cmd = app.add_subcommand("eval", "mAP at IoU 0.5 and 0.7 for a trained run");
  eval_cmd->add_option("run", eval_run, "train output directory (config.txt + model.ckpt)")->required();
  eval_cmd->add_option("--dataset-seed", eval_seed, "dataset seed (default: the run's validation seed)");
  eval_cmd->add_option("--images", eval_images, "image count (default: the run's validation size)");

  ConfigArgs ablate_args;
  std::size_t ablate_seeds = 3;
  auto* ablate_cmd = app.add_subcommand("ablate", "global / offset-only / non-gating / full comparison");
  add_config_options(ablate_cmd, ablate_args);
  ablate_cmd->add_option("--seeds", ablate_seeds, "seeds per variant")->check(CLI::PositiveNumber);

  ConfigArgs sweep_args;
  auto* sweep_cmd = app.add_subcommand("sweep", "regions x regionlet density grid (resumable)");
  add_config_options(sweep_cmd, sweep_args);

  std::string gc_module = "all", gc_csv, gc_mutation = "none";
  std::size_t gc_seeds = 20;
  double gc_tol = 0.0;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc_cmd->add_option("--module", gc_module, "module id or 'all'");
  gc_cmd->add_option("--seeds", gc_seeds, "random instances per module")->check(CLI::PositiveNumber);
  gc_cmd->add_option("--tol", gc_tol, "relative tolerance (default: per module)");
  gc_cmd->add_option("--csv", gc_csv, "per-seed report CSV");
  gc_cmd->add_option("--mutation", gc_mutation, "corrupt the analytic gradient: none|scale|flip-sign");

  std::string warp_in, warp_out, warp_theta, warp_roi;
  std::size_t warp_h = 0, warp_w = 0;
  auto* warp_cmd = app.add_subcommand("demo-warp", "warp a PPM image with one affine sextuple");
  warp_cmd->add_option("input", warp_in, "input PPM")->required();
  warp_cmd->add_option("--theta", warp_theta, "t1,t2,t3,t4,t5,t6")->required();
  warp_cmd->add_option("--height", warp_h, "output height")->required()->check(CLI::PositiveNumber);
  warp_cmd->add_option("--width", warp_w, "output width")->required()->check(CLI::PositiveNumber);
  warp_cmd->add_option("--roi", warp_roi, "x0,y0,width,height in pixels (default: whole image)");
  warp_cmd->add_option("-o,--output", warp_out, "output PPM")->required();

  ConfigArgs export_args;
  std::string export_split = "val", export_dir;
  auto* export_cmd = app.add_subcommand("export", "write a benchmark split as PPM files plus annotations.txt");
  export_cmd->add_option("-c,--config", export_args.path, "key = value config file");
  export_cmd->add_option("--set", export_args.overrides, "override one key")->take_all();
  export_cmd->add_option("--split", export_split, "train|val");
  export_cmd->add_option("dir", export_dir, "destination directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(train_args);
    if (*eval_cmd) return cmd_eval(eval_run, eval_seed, eval_images);
    if (*ablate_cmd) return cmd_ablate(ablate_args, ablate_seeds);
    if (*sweep_cmd) return cmd_sweep(sweep_args);
    if (*gc_cmd) return cmd_gradcheck(gc_module, gc_seeds, gc_tol, gc_csv, gc_mutation);
    if (*warp_cmd) return cmd_demo_warp(warp_in, warp_theta, warp_h, warp_w, warp_roi, warp_out);
    if (*export_cmd) return cmd_export(export_args, export_split, export_dir);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s (see diagnostics.txt in the output directory)\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
