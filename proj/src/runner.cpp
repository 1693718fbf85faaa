#include "forgetlab/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <map>
#include <mutex>
#include <regex>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "forgetlab/binary_io.hpp"
#include "forgetlab/checkpoint.hpp"
#include "forgetlab/error.hpp"

namespace forgetlab {
namespace {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

constexpr std::string_view manifest_format = "forgetlab-manifest";
constexpr std::uint64_t rng_model_init = 100;

std::string fmt_opt(const std::optional<int>& v) { return v ? std::to_string(*v) : std::string(); }

class MetricsTable {
 public:
  MetricsTable(std::string run_id, std::size_t tasks) : run_id_(std::move(run_id)), text_(metrics_header(tasks)) {}

  void row(std::string_view method, std::uint64_t step, std::optional<int> task, std::optional<int> epoch,
           const EvalResult& eval, const FlopsLedger& ledger) {
    text_ += fmt::format("{},{},{},{},{},val,{}", run_id_, method, step, fmt_opt(task), fmt_opt(epoch), eval.average);
    for (double a : eval.per_task) text_ += fmt::format(",{}", a);
    text_ += fmt::format(",{},{},{}\n", ledger.cl_training, ledger.replay, ledger.finetuning);
  }

  const std::string& text() const { return text_; }

 private:
  std::string run_id_;
  std::string text_;
};

std::string checkpoint_name(int task, int epoch) { return fmt::format("t{}_e{}.ckpt", task, epoch); }

ojson ledger_json(const FlopsLedger& l) {
  return ojson{{"cl_training", l.cl_training}, {"replay", l.replay}, {"finetuning", l.finetuning}, {"total", l.total()}};
}

FlopsLedger ledger_from_json(const json& j) {
  FlopsLedger l;
  l.cl_training = j.at("cl_training").get<std::uint64_t>();
  l.replay = j.at("replay").get<std::uint64_t>();
  l.finetuning = j.at("finetuning").get<std::uint64_t>();
  return l;
}

ojson eval_json(const EvalResult& e) { return ojson{{"average", e.average}, {"per_task", e.per_task}}; }

// Inventory of every regular file under dir (sorted, relative paths).
ojson output_inventory(const fs::path& dir, const std::vector<std::string>& skip) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), dir);
    if (std::find(skip.begin(), skip.end(), rel.generic_string()) != skip.end()) continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  ojson out = ojson::array();
  for (const auto& rel : files) {
    const auto bytes = read_file((dir / rel).string());
    out.push_back(ojson{{"path", rel.generic_string()}, {"bytes", bytes.size()}, {"sha256", sha256_hex(bytes)}});
  }
  return out;
}

void prepare_run_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "checkpoints", ec);
  if (ec) fail(ErrorCode::io_error, fmt::format("cannot create {}: {}", dir.string(), ec.message()));
  for (const auto& entry : fs::directory_iterator(dir / "checkpoints")) fs::remove(entry.path());
  for (const char* name : {"buffer.bin", "dynamics.csv", "sensitivity.json"}) fs::remove(dir / name);
}

SelectionMask auto_mask(std::span<const ModelSnapshot> snapshots, int epochs, double threshold) {
  const auto report = sensitivity_from_snapshots(snapshots, epochs, 2);
  return select_sensitive(report, threshold);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

std::string csv_quote(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

}  // namespace

fs::path output_root(const std::optional<std::string>& flag) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv("FORGETLAB_OUT"); env && *env) return env;
  return "runs";
}

std::string metrics_header(std::size_t tasks) {
  std::string h = "run_id,method,step,task,epoch,split,avg_acc";
  for (std::size_t t = 1; t <= tasks; ++t) h += fmt::format(",acc_t{}", t);
  return h + ",flops_cl,flops_replay,flops_ft\n";
}

RunConfig load_config_file(const std::string& path) {
  const std::string text = read_file(path);
  json tree;
  try {
    tree = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::config_invalid, fmt::format("{} is not valid JSON: {}", path, e.what()));
  }
  if (tree.is_object() && tree.contains("format") && tree["format"] == manifest_format) {
    if (!tree.contains("config")) fail(ErrorCode::config_invalid, "manifest has no config");
    return parse_run_config(tree["config"]);
  }
  return parse_run_config(tree);
}

TrainResult cmd_train(const RunConfig& config, const fs::path& out_root) {
  const std::string started = utc_timestamp();
  const Stream stream = build_stream(config.stream);
  const ModelSpec spec = model_spec_for(config, stream);
  Rng init = Rng(config.seed).fork(rng_model_init);
  Model model = build_model(spec, init);

  TrainResult result;
  result.run_id = config.run_id();
  result.run_dir = out_root / result.run_id;
  prepare_run_dir(result.run_dir);
  const fs::path ckpt_dir = result.run_dir / "checkpoints";

  const int N = config.train.epochs_per_task;
  const auto schedule = make_schedule(stream, N, config.train.batch_size, config.seed);
  MetricsTable metrics(result.run_id, stream.tasks.size());
  std::string method_label(to_string(config.method));
  if (config.method == Method::kfpf) method_label += fmt::format("-{}", to_string(config.kfpf.variant));

  const int T = static_cast<int>(stream.tasks.size());
  ojson resolved;
  std::optional<RunOutput> run;
  auto on_epoch = [&](const EpochEvent& ev) {
    Model copy = ev.model;
    metrics.row(method_label, ev.step, ev.task, ev.epoch, evaluate(copy, stream), ev.ledger);
    save_checkpoint((ckpt_dir / checkpoint_name(ev.task, ev.epoch)).string(), ev.model, ev.task, ev.epoch);
  };

  switch (config.method) {
    case Method::sgd:
      run = run_sgd(schedule, std::move(model), config.train, {on_epoch});
      break;
    case Method::er:
      run = run_er(schedule, std::move(model), config.train, {on_epoch});
      break;
    case Method::der:
      run = run_der(schedule, std::move(model), config.train, config.train.der_lambda, {on_epoch});
      break;
    case Method::gdumb: {
      FinetuneConfig ft;
      ft.steps = config.gdumb_steps;
      ft.batch_size = config.train.batch_size;
      ft.peak_lr = config.gdumb_lr;
      run = run_gdumb(schedule, std::move(model), config.train, ft);
      metrics.row(method_label, run->steps, T, N, evaluate(run->model, stream), run->ledger);
      break;
    }
    case Method::kfpf: {
      KfpfConfig kc;
      kc.tau = config.kfpf.tau > 0 ? config.kfpf.tau : schedule.size() / config.kfpf.passes + 1;
      kc.variant = config.kfpf.variant;
      kc.lambda = config.kfpf.lambda;
      kc.identify_step = config.kfpf.identify_step;
      if (config.kfpf.mask != "auto") kc.mask = parse_mask(config.kfpf.mask);
      kc.threshold = config.kfpf.threshold;
      kc.probes = config.kfpf.probes;
      FinetuneConfig ft;
      ft.steps = config.kfpf.steps;
      ft.batch_size = config.kfpf.batch_size;
      ft.peak_lr = config.kfpf.peak_lr;
      KfpfHooks hooks;
      hooks.on_step = [&](const Model& m, std::uint64_t step, const FlopsLedger& ledger) {
        const auto& b = schedule[step - 1];
        if (!b.epoch_end) return;
        on_epoch({m, *b.task, *b.epoch, step, ledger});
      };
      auto out = run_kfpf(schedule, std::move(model), config.train, kc, ft, hooks);
      metrics.row(method_label + "+fpf", out.run.steps, T, N, evaluate(out.run.model, stream), out.run.ledger);
      resolved["tau"] = kc.tau;
      resolved["fpf_passes"] = out.fpf_passes;
      resolved["kfpf_mask"] = out.mask.to_string();
      resolved["reads_outside_fpf"] = out.reads_outside_fpf;
      if (out.report) {
        ojson scores = ojson::object();
        for (const auto& [g, s] : out.report->scores) scores[g] = s;
        resolved["kfpf_scores"] = scores;
      }
      result.finetune_mask = out.mask;
      run = std::move(out.run);
      break;
    }
  }

  if (config.fpf.enabled && config.method != Method::gdumb && config.method != Method::kfpf) {
    FinetuneConfig ft;
    ft.mask = config.fpf.mask == "auto" ? auto_mask(run->snapshots, N, config.fpf.threshold)
                                        : parse_mask(config.fpf.mask);
    ft.steps = config.fpf.steps;
    ft.batch_size = config.fpf.batch_size;
    ft.peak_lr = config.fpf.peak_lr;
    Rng rng = finetune_rng(config.seed, 0);
    fpf(run->model, run->buffer, ft, rng, &run->ledger);
    metrics.row(method_label + "+fpf", run->steps, T, N, evaluate(run->model, stream), run->ledger);
    resolved["fpf_mask"] = ft.mask.to_string();
    result.finetune_mask = ft.mask;
  }

  result.final_eval = evaluate(run->model, stream);
  result.ledger = run->ledger;
  if (result.finetune_mask) result.finetune_fraction = group_fraction(run->model.groups(), *result.finetune_mask);
  resolved["steps"] = run->steps;
  resolved["ledger"] = ledger_json(run->ledger);
  resolved["final"] = eval_json(result.final_eval);

  save_checkpoint((ckpt_dir / "final.ckpt").string(), run->model, T, N);
  if (config.train.buffer_capacity > 0) run->buffer.save((result.run_dir / "buffer.bin").string());
  write_file((result.run_dir / "metrics.csv").string(), metrics.text());

  ojson manifest;
  manifest["format"] = manifest_format;
  manifest["version"] = 1;
  manifest["run_id"] = result.run_id;
  manifest["code_version"] = code_version;
  manifest["rng_algorithm"] = Rng::algorithm_id;
  manifest["seeds"] = ojson{{"run", config.seed}, {"data", config.stream.seed}};
  manifest["config"] = to_json(config);
  manifest["resolved"] = resolved;
  manifest["started_at"] = started;
  manifest["finished_at"] = utc_timestamp();
  manifest["outputs"] = output_inventory(result.run_dir, {"manifest.json", "dynamics.csv", "sensitivity.json"});
  write_file((result.run_dir / "manifest.json").string(), manifest.dump(2) + "\n");
  return result;
}

std::vector<ModelSnapshot> load_snapshots(const fs::path& run_dir) {
  const fs::path dir = run_dir / "checkpoints";
  if (!fs::is_directory(dir)) fail(ErrorCode::missing_snapshots, fmt::format("{} has no checkpoints", run_dir.string()));
  static const std::regex pattern(R"(t(\d+)_e(\d+)\.ckpt)");
  std::vector<std::pair<std::pair<int, int>, fs::path>> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern)) found.push_back({{std::stoi(m[1]), std::stoi(m[2])}, entry.path()});
  }
  if (found.empty()) fail(ErrorCode::missing_snapshots, fmt::format("{} has no epoch checkpoints", dir.string()));
  std::sort(found.begin(), found.end());
  std::vector<ModelSnapshot> out;
  for (const auto& [key, path] : found) out.push_back(load_checkpoint(path.string()).model.snapshot(key.first, key.second));
  return out;
}

DynamicsResult cmd_dynamics(const fs::path& run_dir, std::optional<double> threshold) {
  const auto snaps = load_snapshots(run_dir);
  int epochs = 0;
  for (const auto& s : snaps) epochs = std::max(epochs, s.epoch);
  DynamicsResult r;
  r.epoch_records = consecutive_epoch_metric(snaps);
  for (int n = 1; n <= epochs; ++n) {
    auto recs = consecutive_task_metric(snaps, n);
    r.task_records.insert(r.task_records.end(), recs.begin(), recs.end());
  }
  r.report = sensitivity_from_snapshots(snaps, epochs, 2);
  r.mask_fpf = select_sensitive(r.report, fpf_threshold);
  r.mask_kfpf = select_sensitive(r.report, kfpf_threshold);
  if (threshold) r.mask_custom = select_sensitive(r.report, *threshold);
  const auto window = static_cast<std::size_t>(epochs - 1);
  if (aggregate_transitions(r.epoch_records).size() >= 2) r.boundaries = detect_boundaries(r.epoch_records, 5.0, window);

  const std::string run_id = run_dir.filename().string();
  std::string csv = dynamics_csv(run_id, r.epoch_records);
  const std::string task_csv = dynamics_csv(run_id, r.task_records);
  csv += task_csv.substr(task_csv.find('\n') + 1);
  write_file((run_dir / "dynamics.csv").string(), csv);

  ojson j;
  j["run_id"] = run_id;
  j["window"] = r.report.window;
  j["group_count"] = r.report.group_count;
  ojson scores = ojson::object();
  double total = 0.0;
  for (const auto& [g, s] : r.report.scores) {
    scores[g] = s;
    total += s;
  }
  j["scores"] = scores;
  j["score_sum"] = total;
  auto mask_list = [](const SelectionMask& m) { return std::vector<std::string>(m.groups().begin(), m.groups().end()); };
  j["masks"] = ojson{{"1.0", mask_list(r.mask_fpf)}, {"0.3", mask_list(r.mask_kfpf)}};
  if (r.mask_custom) j["masks"][fmt::format("{}", *threshold)] = mask_list(*r.mask_custom);
  j["boundaries"] = ojson{{"spike_factor", 5.0}, {"window", window}, {"transitions", r.boundaries}};
  write_file((run_dir / "sensitivity.json").string(), j.dump(2) + "\n");
  return r;
}

FpfResult cmd_fpf(const fs::path& run_dir, const FpfOptions& options, const fs::path& out_root) {
  if (!fs::exists(run_dir / "buffer.bin")) {
    fail(ErrorCode::missing_buffer, fmt::format("{} has no buffer.bin", run_dir.string()));
  }
  const fs::path final_ckpt = run_dir / "checkpoints" / "final.ckpt";
  if (!fs::exists(final_ckpt)) fail(ErrorCode::io_error, fmt::format("{} has no final checkpoint", run_dir.string()));
  const std::string started = utc_timestamp();
  const fs::path manifest_path = run_dir / "manifest.json";
  const RunConfig config = load_config_file(manifest_path.string());
  const json source = json::parse(read_file(manifest_path.string()));
  const Stream stream = build_stream(config.stream);
  Model model = load_checkpoint(final_ckpt.string()).model;
  const ReplayBuffer buffer = ReplayBuffer::load((run_dir / "buffer.bin").string());

  FpfResult result;
  const std::string mask_text = options.mask.value_or(config.fpf.mask);
  result.mask = mask_text == "auto"
                    ? auto_mask(load_snapshots(run_dir), config.train.epochs_per_task,
                                options.threshold.value_or(fpf_threshold))
                    : parse_mask(mask_text);
  FinetuneConfig ft;
  ft.mask = result.mask;
  ft.steps = options.steps.value_or(config.fpf.steps);
  ft.batch_size = options.batch_size.value_or(config.fpf.batch_size);
  ft.peak_lr = options.peak_lr.value_or(config.fpf.peak_lr);

  result.before = evaluate(model, stream);
  FlopsLedger ledger;
  if (source.contains("resolved") && source["resolved"].contains("ledger")) {
    ledger = ledger_from_json(source["resolved"]["ledger"]);
  }
  const FlopsLedger before_ledger = ledger;
  Rng rng = finetune_rng(config.seed, 0);
  fpf(model, buffer, ft, rng, &ledger);
  result.after = evaluate(model, stream);

  const std::string source_id = config.run_id();
  const std::string run_id = source_id + "+fpf";
  result.run_dir = out_root / run_id;
  prepare_run_dir(result.run_dir);
  const int T = static_cast<int>(stream.tasks.size());
  const int N = config.train.epochs_per_task;
  const std::uint64_t steps = source.value("resolved", json::object()).value("steps", std::uint64_t{0});
  MetricsTable metrics(run_id, stream.tasks.size());
  std::string method(to_string(config.method));
  metrics.row(method, steps, T, N, result.before, before_ledger);
  metrics.row(method + "+fpf", steps, T, N, result.after, ledger);
  write_file((result.run_dir / "metrics.csv").string(), metrics.text());
  save_checkpoint((result.run_dir / "checkpoints" / "final.ckpt").string(), model, T, N);

  ojson report;
  report["source_run"] = source_id;
  report["mask"] = result.mask.to_string();
  report["mask_fraction"] = group_fraction(model.groups(), result.mask);
  report["steps"] = ft.steps;
  report["batch_size"] = ft.batch_size;
  report["peak_lr"] = ft.peak_lr;
  report["before"] = eval_json(result.before);
  report["after"] = eval_json(result.after);
  report["delta_average"] = result.after.average - result.before.average;
  report["finetuning_flops"] = ledger.finetuning - before_ledger.finetuning;
  write_file((result.run_dir / "fpf_report.json").string(), report.dump(2) + "\n");

  ojson manifest;
  manifest["format"] = "forgetlab-fpf-manifest";
  manifest["version"] = 1;
  manifest["run_id"] = run_id;
  manifest["source_run"] = source_id;
  manifest["source_dir"] = run_dir.string();
  manifest["code_version"] = code_version;
  manifest["rng_algorithm"] = Rng::algorithm_id;
  manifest["seeds"] = ojson{{"run", config.seed}, {"finetune_pass", 0}};
  manifest["config"] = to_json(config);
  manifest["finetune"] = ojson{{"mask", result.mask.to_string()}, {"steps", ft.steps}, {"batch_size", ft.batch_size},
                               {"peak_lr", ft.peak_lr}};
  manifest["started_at"] = started;
  manifest["finished_at"] = utc_timestamp();
  manifest["outputs"] = output_inventory(result.run_dir, {"manifest.json"});
  write_file((result.run_dir / "manifest.json").string(), manifest.dump(2) + "\n");
  return result;
}

SweepSpec parse_sweep(const json& tree) {
  if (!tree.is_object()) fail(ErrorCode::config_invalid, "sweep: expected an object");
  SweepSpec spec;
  for (const auto& [key, value] : tree.items()) {
    if (key != "name" && key != "base" && key != "cells" && key != "seeds") {
      fail(ErrorCode::config_invalid, fmt::format("sweep.{}: unknown field", key));
    }
  }
  try {
    spec.name = tree.value("name", spec.name);
    if (tree.contains("base")) spec.base = tree["base"];
    spec.seeds = tree.at("seeds").get<std::vector<std::uint64_t>>();
  } catch (const json::exception& e) {
    fail(ErrorCode::config_invalid, fmt::format("sweep: {}", e.what()));
  }
  if (!spec.base.is_object()) fail(ErrorCode::config_invalid, "sweep.base: expected an object");
  if (spec.seeds.empty()) fail(ErrorCode::config_invalid, "sweep.seeds: must be nonempty");
  if (!tree.contains("cells") || !tree["cells"].is_array() || tree["cells"].empty()) {
    fail(ErrorCode::config_invalid, "sweep.cells: must be a nonempty array");
  }
  const std::string base_method = spec.base.value("method", std::string("sgd"));
  for (std::size_t i = 0; i < tree["cells"].size(); ++i) {
    const json& c = tree["cells"][i];
    const std::string where = fmt::format("sweep.cells[{}]", i);
    if (!c.is_object()) fail(ErrorCode::config_invalid, where + ": expected an object");
    SweepCell cell;
    json patch = json::object();
    const std::string method = c.value("method", base_method);
    const bool kfpf = method == "kfpf";
    for (const auto& [key, value] : c.items()) {
      if (key == "name") {
        cell.name = value.get<std::string>();
      } else if (key == "method") {
        patch["method"] = value;
      } else if (key == "buffer_capacity") {
        patch["train"]["buffer_capacity"] = value;
      } else if (key == "tau") {
        patch["kfpf"]["tau"] = value;
      } else if (key == "passes") {
        patch["kfpf"]["passes"] = value;
      } else if (key == "variant") {
        patch["kfpf"]["variant"] = value;
      } else if (key == "steps") {
        patch[kfpf ? "kfpf" : "fpf"]["steps"] = value;
      } else if (key == "mask") {
        patch[kfpf ? "kfpf" : "fpf"]["mask"] = value;
      } else if (key == "lambda") {
        if (kfpf) {
          patch["kfpf"]["lambda"] = value;
        } else {
          patch["train"]["der_lambda"] = value;
        }
      } else if (key == "fpf") {
        patch["fpf"]["enabled"] = value;
      } else if (key != "overrides") {
        fail(ErrorCode::config_invalid, fmt::format("{}.{}: unknown field", where, key));
      }
    }
    if (c.contains("overrides")) patch.merge_patch(c["overrides"]);
    if (cell.name.empty()) cell.name = fmt::format("cell{}", i);
    for (const auto& other : spec.cells) {
      if (other.name == cell.name) fail(ErrorCode::config_invalid, fmt::format("{}: duplicate name", where));
    }
    cell.overrides = std::move(patch);
    spec.cells.push_back(std::move(cell));
  }
  return spec;
}

std::string aggregate_csv(const std::vector<SweepRow>& rows) {
  std::string out =
      "kind,cell,method,seed,status,n,avg_acc,avg_acc_std,flops_cl,flops_replay,flops_ft,flops_total,flops_norm,"
      "ft_param_fraction,error\n";
  double max_total = 0.0;
  for (const auto& r : rows) {
    if (r.ok) max_total = std::max(max_total, static_cast<double>(r.ledger.total()));
  }
  auto norm = [&](double total) { return max_total > 0.0 ? total / max_total : 0.0; };
  for (const auto& r : rows) {
    if (!r.ok) {
      out += fmt::format("raw,{},{},{},failed,0,,,,,,,,,{}\n", csv_quote(r.cell), r.method, r.seed, csv_quote(r.error));
      continue;
    }
    const auto total = static_cast<double>(r.ledger.total());
    out += fmt::format("raw,{},{},{},ok,1,{},0,{},{},{},{},{},{},\n", csv_quote(r.cell), r.method, r.seed, r.avg_acc,
                       r.ledger.cl_training, r.ledger.replay, r.ledger.finetuning, r.ledger.total(), norm(total),
                       r.finetune_fraction);
  }
  std::vector<std::string> order;
  for (const auto& r : rows) {
    if (std::find(order.begin(), order.end(), r.cell) == order.end()) order.push_back(r.cell);
  }
  for (const auto& cell : order) {
    std::vector<const SweepRow*> ok;
    std::string method;
    for (const auto& r : rows) {
      if (r.cell != cell) continue;
      method = r.method;
      if (r.ok) ok.push_back(&r);
    }
    if (ok.empty()) {
      out += fmt::format("aggregate,{},{},,failed,0,,,,,,,,,no successful seeds\n", csv_quote(cell), method);
      continue;
    }
    const auto n = static_cast<double>(ok.size());
    auto mean_of = [&](auto field) {
      double s = 0.0;
      for (const auto* r : ok) s += field(*r);
      return s / n;
    };
    const double acc = mean_of([](const SweepRow& r) { return r.avg_acc; });
    double var = 0.0;
    for (const auto* r : ok) var += (r->avg_acc - acc) * (r->avg_acc - acc);
    const double sd = ok.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    const double cl = mean_of([](const SweepRow& r) { return static_cast<double>(r.ledger.cl_training); });
    const double rp = mean_of([](const SweepRow& r) { return static_cast<double>(r.ledger.replay); });
    const double ftf = mean_of([](const SweepRow& r) { return static_cast<double>(r.ledger.finetuning); });
    const double total = mean_of([](const SweepRow& r) { return static_cast<double>(r.ledger.total()); });
    const double frac = mean_of([](const SweepRow& r) { return r.finetune_fraction; });
    out += fmt::format("aggregate,{},{},,ok,{},{},{},{},{},{},{},{},{},\n", csv_quote(cell), method, ok.size(), acc, sd,
                       cl, rp, ftf, total, norm(total), frac);
  }
  return out;
}

std::vector<SweepRow> cmd_sweep(const SweepSpec& spec, const fs::path& out_root, std::size_t threads) {
  struct Job {
    const SweepCell* cell;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& cell : spec.cells) {
    for (auto seed : spec.seeds) jobs.push_back({&cell, seed});
  }
  const fs::path sweep_dir = out_root / spec.name;
  const fs::path cells_dir = sweep_dir / "cells";
  fs::create_directories(cells_dir);

  std::vector<SweepRow> rows(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const Job& job = jobs[i];
      SweepRow& row = rows[i];
      row.cell = job.cell->name;
      row.seed = job.seed;
      json tree = spec.base;
      tree.merge_patch(job.cell->overrides);
      row.method = tree.value("method", std::string("sgd"));
      tree["seed"] = job.seed;
      tree["name"] = fmt::format("{}-s{}", job.cell->name, job.seed);
      try {
        const RunConfig config = parse_run_config(tree);
        const TrainResult r = cmd_train(config, cells_dir);
        row.ok = true;
        row.avg_acc = r.final_eval.average;
        row.ledger = r.ledger;
        row.finetune_fraction = r.finetune_fraction;
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  write_file((sweep_dir / "aggregate.csv").string(), aggregate_csv(rows));
  return rows;
}

std::string cmd_report(const fs::path& dir) {
  std::ostringstream out;
  if (fs::exists(dir / "aggregate.csv")) {
    std::istringstream in(read_file((dir / "aggregate.csv").string()));
    std::string line;
    std::getline(in, line);
    out << fmt::format("{:<24} {:<8} {:>3} {:>18} {:>10} {:>10}\n", "cell", "method", "n", "avg_acc", "flops_norm",
                       "ft_frac");
    while (std::getline(in, line)) {
      const auto f = split_csv_line(line);
      if (f.size() < 15 || f[0] != "aggregate") continue;
      if (f[4] != "ok") {
        out << fmt::format("{:<24} {:<8} failed\n", f[1], f[2]);
        continue;
      }
      out << fmt::format("{:<24} {:<8} {:>3} {:>18} {:>10.4f} {:>10.4f}\n", f[1], f[2], f[5],
                         fmt::format("{:.4f} +- {:.4f}", std::stod(f[6]), std::stod(f[7])), std::stod(f[12]),
                         std::stod(f[13]));
    }
    return out.str();
  }
  if (!fs::exists(dir / "metrics.csv")) fail(ErrorCode::io_error, fmt::format("{} is not a run or sweep directory", dir.string()));
  std::istringstream in(read_file((dir / "metrics.csv").string()));
  std::string header;
  std::string line;
  std::string last;
  std::getline(in, header);
  while (std::getline(in, line)) {
    if (!line.empty()) last = line;
  }
  const auto names = split_csv_line(header);
  const auto values = split_csv_line(last);
  out << "run " << dir.filename().string() << "\n";
  for (std::size_t i = 0; i < names.size() && i < values.size(); ++i) {
    out << fmt::format("  {:<14} {}\n", names[i], values[i]);
  }
  if (fs::exists(dir / "sensitivity.json")) {
    const json s = json::parse(read_file((dir / "sensitivity.json").string()));
    out << "sensitivity (" << s.value("window", "") << ")\n";
    for (const auto& [g, v] : s["scores"].items()) out << fmt::format("  {:<14} {:.4f}\n", g, v.get<double>());
    for (const auto& [t, m] : s["masks"].items()) {
      std::string groups;
      for (const auto& g : m) groups += (groups.empty() ? "" : ",") + g.get<std::string>();
      out << fmt::format("  mask@{:<8} {}\n", t, groups);
    }
  }
  return out.str();
}

}  // namespace forgetlab
