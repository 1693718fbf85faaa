#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "forgetlab/config.hpp"
#include "forgetlab/dynamics.hpp"
#include "forgetlab/engine.hpp"

namespace forgetlab {

namespace fs = std::filesystem;

/// --out when given, else $FORGETLAB_OUT, else "runs".
fs::path output_root(const std::optional<std::string>& flag);

struct TrainResult {
  fs::path run_dir;
  std::string run_id;
  EvalResult final_eval;
  FlopsLedger ledger;
  std::optional<SelectionMask> finetune_mask;  // mask of the last FPF pass
  double finetune_fraction = 0.0;              // parameter share of that mask
};

/// Runs one configured experiment into <out_root>/<run_id>/:
/// manifest.json, metrics.csv, checkpoints/t{t}_e{n}.ckpt, checkpoints/final.ckpt,
/// buffer.bin (when the method keeps a buffer).
TrainResult cmd_train(const RunConfig& config, const fs::path& out_root);

/// Accepts a config file or a manifest.json (its "config" is rerun).
RunConfig load_config_file(const std::string& path);

/// Header of metrics.csv for T tasks.
std::string metrics_header(std::size_t tasks);

/// Reads checkpoints/t*_e*.ckpt as snapshots. Throws MissingSnapshots.
std::vector<ModelSnapshot> load_snapshots(const fs::path& run_dir);

struct DynamicsResult {
  std::vector<DynamicsRecord> epoch_records;
  std::vector<DynamicsRecord> task_records;
  SensitivityReport report;
  SelectionMask mask_fpf;   // threshold 1.0
  SelectionMask mask_kfpf;  // threshold 0.3
  std::optional<SelectionMask> mask_custom;
  std::vector<std::size_t> boundaries;  // indices into the transition sequence
};

/// Writes dynamics.csv and sensitivity.json into the run directory.
DynamicsResult cmd_dynamics(const fs::path& run_dir, std::optional<double> threshold = std::nullopt);

struct FpfOptions {
  std::optional<std::string> mask;  // group list or "auto"
  std::optional<std::size_t> steps;
  std::optional<std::size_t> batch_size;
  std::optional<double> peak_lr;
  std::optional<double> threshold;
};

struct FpfResult {
  fs::path run_dir;
  SelectionMask mask;
  EvalResult before;
  EvalResult after;
};

/// Applies fpf to a finished run's final checkpoint and buffer, writing a
/// new run directory <out_root>/<run_id>+fpf. Throws MissingBuffer.
FpfResult cmd_fpf(const fs::path& run_dir, const FpfOptions& options, const fs::path& out_root);

struct SweepCell {
  std::string name;
  nlohmann::json overrides;  // merged into the base config
};

struct SweepSpec {
  std::string name = "sweep";
  nlohmann::json base = nlohmann::json::object();
  std::vector<SweepCell> cells;
  std::vector<std::uint64_t> seeds;
};

/// Cells accept shorthand keys (method, buffer_capacity, tau, steps, passes,
/// mask, lambda, variant, fpf) plus a free-form "overrides" object.
SweepSpec parse_sweep(const nlohmann::json& tree);

struct SweepRow {
  std::string cell;
  std::string method;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double avg_acc = 0.0;
  FlopsLedger ledger;
  double finetune_fraction = 0.0;
};

/// Raw rows plus one aggregate row per cell (mean and sample std over the
/// successful seeds). FLOPs are divided by the largest raw total.
std::string aggregate_csv(const std::vector<SweepRow>& rows);

/// Runs every (cell, seed) on a pool of `threads` workers into
/// <out_root>/<name>/, then writes aggregate.csv there. Failed cells are
/// reported as rows and do not stop the sweep.
std::vector<SweepRow> cmd_sweep(const SweepSpec& spec, const fs::path& out_root, std::size_t threads);

/// Human-readable summary of a run or sweep directory.
std::string cmd_report(const fs::path& dir);

}  // namespace forgetlab
