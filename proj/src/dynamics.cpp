#include "forgetlab/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "forgetlab/error.hpp"

namespace forgetlab {

std::string_view to_string(DynamicsMetric metric) {
  return metric == DynamicsMetric::consecutive_epoch ? "consecutive_epoch" : "consecutive_task";
}

double l1_mean_diff(std::span<const double> v1, std::span<const double> v2) {
  if (v1.size() != v2.size()) {
    fail(ErrorCode::length_mismatch, fmt::format("l1_mean_diff: {} vs {}", v1.size(), v2.size()));
  }
  if (v1.empty()) fail(ErrorCode::empty_vector, "l1_mean_diff: empty vectors");
  double acc = 0.0;
  for (std::size_t i = 0; i < v1.size(); ++i) acc += std::abs(v1[i] - v2[i]);
  return acc / static_cast<double>(v1.size());
}

namespace {

struct LayerStats {
  double mean = 0.0;
  double spread = 0.0;
};

LayerStats compare_group(const GroupVectors& from, const GroupVectors& to) {
  if (from.layers.size() != to.layers.size()) {
    fail(ErrorCode::length_mismatch, fmt::format("group {} layer count differs", from.group_id));
  }
  std::vector<double> per_layer;
  per_layer.reserve(from.layers.size());
  for (std::size_t l = 0; l < from.layers.size(); ++l) {
    per_layer.push_back(l1_mean_diff(from.layers[l].values, to.layers[l].values));
  }
  LayerStats s;
  if (per_layer.empty()) return s;
  for (double v : per_layer) s.mean += v;
  s.mean /= static_cast<double>(per_layer.size());
  double var = 0.0;
  for (double v : per_layer) var += (v - s.mean) * (v - s.mean);
  s.spread = std::sqrt(var / static_cast<double>(per_layer.size()));
  return s;
}

void compare(const ModelSnapshot& from, const ModelSnapshot& to, DynamicsMetric metric, int task, int epoch,
             bool boundary, std::vector<DynamicsRecord>& out) {
  for (const auto& g : from.groups) {
    const auto s = compare_group(g, to.group(g.group_id));
    out.push_back({g.group_id, metric, task, epoch, boundary, s.mean, s.spread});
  }
}

// Index of snapshots by (task, epoch) plus the grid extent.
struct SnapshotGrid {
  std::map<std::pair<int, int>, const ModelSnapshot*> at;
  int tasks = 0;
  int epochs = 0;

  explicit SnapshotGrid(std::span<const ModelSnapshot> snapshots) {
    for (const auto& s : snapshots) {
      at[{s.task, s.epoch}] = &s;
      tasks = std::max(tasks, s.task);
      epochs = std::max(epochs, s.epoch);
    }
  }

  const ModelSnapshot& get(int t, int n) const {
    auto it = at.find({t, n});
    if (it == at.end()) fail(ErrorCode::missing_snapshot, fmt::format("no snapshot for task {} epoch {}", t, n));
    return *it->second;
  }
};

}  // namespace

std::vector<DynamicsRecord> consecutive_epoch_metric(std::span<const ModelSnapshot> snapshots) {
  std::vector<DynamicsRecord> out;
  if (snapshots.empty()) return out;
  const SnapshotGrid grid(snapshots);
  for (int t = 1; t <= grid.tasks; ++t) {
    for (int n = 1; n <= grid.epochs; ++n) {
      const ModelSnapshot& cur = grid.get(t, n);
      if (n > 1) {
        compare(grid.get(t, n - 1), cur, DynamicsMetric::consecutive_epoch, t, n, false, out);
      } else if (t > 1) {
        compare(grid.get(t - 1, grid.epochs), cur, DynamicsMetric::consecutive_epoch, t, n, true, out);
      }
    }
  }
  return out;
}

std::vector<DynamicsRecord> compare_snapshots(const ModelSnapshot& from, const ModelSnapshot& to,
                                              DynamicsMetric metric) {
  std::vector<DynamicsRecord> out;
  compare(from, to, metric, to.task, to.epoch, false, out);
  return out;
}

std::vector<DynamicsRecord> consecutive_task_metric(std::span<const ModelSnapshot> snapshots, int epoch) {
  std::vector<DynamicsRecord> out;
  if (snapshots.empty()) return out;
  const SnapshotGrid grid(snapshots);
  for (int t = 1; t < grid.tasks; ++t) {
    compare(grid.get(t, epoch), grid.get(t + 1, epoch), DynamicsMetric::consecutive_task, t, epoch, false, out);
  }
  return out;
}

double SensitivityReport::score(std::string_view group) const {
  for (const auto& [g, s] : scores) {
    if (g == group) return s;
  }
  fail(ErrorCode::unknown_group, fmt::format("no score for group {}", group));
}

SensitivityReport sensitivity_scores(const std::vector<std::pair<std::string, double>>& group_dynamics,
                                     std::string window) {
  double total = 0.0;
  for (const auto& [g, c] : group_dynamics) {
    if (!(c >= 0.0) || !std::isfinite(c)) {
      fail(ErrorCode::shape_mismatch, fmt::format("dynamics for {} must be finite and >= 0", g));
    }
    total += c;
  }
  if (!(total > 0.0)) fail(ErrorCode::all_zero_dynamics, "every group has zero dynamics");
  SensitivityReport report;
  report.group_count = group_dynamics.size();
  report.window = std::move(window);
  const auto G = static_cast<double>(report.group_count);
  for (const auto& [g, c] : group_dynamics) report.scores.emplace_back(g, c / total * G);
  report.threshold = fpf_threshold;
  report.mask = select_sensitive(report, fpf_threshold);
  return report;
}

std::vector<std::pair<std::string, double>> mean_group_dynamics(std::span<const DynamicsRecord> records) {
  std::vector<std::pair<std::string, double>> sums;
  std::vector<std::size_t> counts;
  for (const auto& r : records) {
    auto it = std::find_if(sums.begin(), sums.end(), [&](const auto& p) { return p.first == r.group_id; });
    if (it == sums.end()) {
      sums.emplace_back(r.group_id, 0.0);
      counts.push_back(0);
      it = std::prev(sums.end());
    }
    it->second += r.value;
    ++counts[static_cast<std::size_t>(it - sums.begin())];
  }
  for (std::size_t i = 0; i < sums.size(); ++i) sums[i].second /= static_cast<double>(counts[i]);
  return sums;
}

SelectionMask select_sensitive(const SensitivityReport& report, double threshold) {
  SelectionMask mask;
  for (const auto& [g, s] : report.scores) {
    if (s > threshold) mask.insert(g);
  }
  return mask;
}

SensitivityReport sensitivity_from_snapshots(std::span<const ModelSnapshot> snapshots, int epoch,
                                             std::size_t max_transitions) {
  auto records = consecutive_task_metric(snapshots, epoch);
  if (records.empty()) fail(ErrorCode::missing_snapshots, "sensitivity needs at least two tasks of snapshots");
  int last_task = 0;
  for (const auto& r : records) last_task = std::max(last_task, r.task);
  if (max_transitions > 0) {
    std::erase_if(records, [&](const DynamicsRecord& r) { return r.task > static_cast<int>(max_transitions); });
    last_task = std::min(last_task, static_cast<int>(max_transitions));
  }
  return sensitivity_scores(mean_group_dynamics(records),
                            fmt::format("consecutive_task@epoch{}:tasks1-{}", epoch, last_task + 1));
}

std::vector<double> aggregate_transitions(std::span<const DynamicsRecord> epoch_records) {
  std::vector<double> out;
  std::vector<std::size_t> counts;
  std::pair<int, int> current{-1, -1};
  for (const auto& r : epoch_records) {
    if (std::pair{r.task, r.epoch} != current) {
      current = {r.task, r.epoch};
      out.push_back(0.0);
      counts.push_back(0);
    }
    out.back() += r.value;
    ++counts.back();
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= static_cast<double>(counts[i]);
  return out;
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<std::size_t> detect_boundaries(std::span<const DynamicsRecord> epoch_records, double spike_factor,
                                           std::size_t window) {
  const auto series = aggregate_transitions(epoch_records);
  if (series.size() < 2) fail(ErrorCode::insufficient_history, "boundary detection needs >= 2 transitions");
  const double global = median(series);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < series.size(); ++i) {
    double reference = global;
    if (window > 0 && i >= window) {
      reference = median(std::vector<double>(series.begin() + static_cast<std::ptrdiff_t>(i - window),
                                             series.begin() + static_cast<std::ptrdiff_t>(i)));
    }
    if (series[i] > spike_factor * reference) out.push_back(i);
  }
  return out;
}

std::string dynamics_csv(std::string_view run_id, std::span<const DynamicsRecord> records) {
  std::string out = "run_id,metric,group,t,n,value,spread\n";
  for (const auto& r : records) {
    out += fmt::format("{},{},{},{},{},{},{}\n", run_id, to_string(r.metric), r.group_id, r.task, r.epoch, r.value,
                       r.spread);
  }
  return out;
}

}  // namespace forgetlab
