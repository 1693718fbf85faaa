#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "forgetlab/binary_io.hpp"
#include "forgetlab/config.hpp"
#include "forgetlab/error.hpp"
#include "forgetlab/runner.hpp"

using namespace forgetlab;

namespace {

std::string groups_text(const SelectionMask& m) { return m.empty() ? "(none)" : m.to_string(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual-learning experiments: baselines, training dynamics, FPF and k-FPF"};
  app.require_subcommand(1);

  std::optional<std::string> out_flag;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string run_dir;
  std::optional<std::string> mask;
  std::optional<double> threshold;
  std::optional<std::size_t> steps;
  std::optional<double> peak_lr;
  std::size_t threads = 1;

  auto* train = app.add_subcommand("train", "Run one configured experiment");
  train->add_option("--config", config_path, "Config JSON or a run's manifest.json")->required();
  train->add_option("--seed", seed, "Override the run seed (and the data seed)");
  train->add_option("--out", out_flag, "Output root (default $FORGETLAB_OUT or ./runs)");

  auto* dynamics = app.add_subcommand("dynamics", "Training-dynamics CSV and sensitivity report for a run");
  dynamics->add_option("run_dir", run_dir)->required();
  dynamics->add_option("--threshold", threshold, "Extra selection threshold to report");

  auto* fpf = app.add_subcommand("fpf", "Finetune a finished run's sensitive groups on its buffer");
  fpf->add_option("run_dir", run_dir)->required();
  fpf->add_option("--mask", mask, "Comma-separated group ids, or 'auto'");
  fpf->add_option("--threshold", threshold, "Selection threshold for --mask auto");
  fpf->add_option("--steps", steps, "Finetuning steps K");
  fpf->add_option("--lr", peak_lr, "Peak learning rate");
  fpf->add_option("--out", out_flag, "Output root");

  auto* sweep = app.add_subcommand("sweep", "Run a grid of cells over seeds");
  sweep->add_option("--config", config_path, "Sweep JSON")->required();
  sweep->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  sweep->add_option("--out", out_flag, "Output root");

  auto* report = app.add_subcommand("report", "Summarize a run or sweep directory");
  report->add_option("run_dir", run_dir)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      RunConfig config = load_config_file(config_path);
      if (seed) {
        config.seed = *seed;
        config.train.seed = *seed;
        config.stream.seed = *seed;
        config.name.clear();
      }
      const auto result = cmd_train(config, output_root(out_flag));
      std::cout << fmt::format("{}: avg_acc {:.4f}, total FLOPs {}\n", result.run_dir.string(),
                               result.final_eval.average, result.ledger.total());
    } else if (dynamics->parsed()) {
      const auto r = cmd_dynamics(run_dir, threshold);
      for (const auto& [g, s] : r.report.scores) std::cout << fmt::format("{:<14} {:.4f}\n", g, s);
      std::cout << "mask@1.0  " << groups_text(r.mask_fpf) << "\n";
      std::cout << "mask@0.3  " << groups_text(r.mask_kfpf) << "\n";
      if (r.mask_custom) std::cout << fmt::format("mask@{:<5} {}\n", *threshold, groups_text(*r.mask_custom));
    } else if (fpf->parsed()) {
      FpfOptions options;
      options.mask = mask;
      options.steps = steps;
      options.peak_lr = peak_lr;
      options.threshold = threshold;
      const auto r = cmd_fpf(run_dir, options, output_root(out_flag));
      std::cout << fmt::format("{}: mask {} avg_acc {:.4f} -> {:.4f}\n", r.run_dir.string(), r.mask.to_string(),
                               r.before.average, r.after.average);
    } else if (sweep->parsed()) {
      const auto spec = parse_sweep(nlohmann::json::parse(read_file(config_path)));
      const auto rows = cmd_sweep(spec, output_root(out_flag), threads);
      std::size_t failed = 0;
      for (const auto& r : rows) failed += r.ok ? 0 : 1;
      std::cout << cmd_report(output_root(out_flag) / spec.name);
      if (failed > 0) std::cerr << fmt::format("{} of {} runs failed\n", failed, rows.size());
    } else if (report->parsed()) {
      std::cout << cmd_report(run_dir);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
