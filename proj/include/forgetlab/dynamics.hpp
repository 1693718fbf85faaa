#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "forgetlab/nn.hpp"

namespace forgetlab {

enum class DynamicsMetric { consecutive_epoch, consecutive_task };

std::string_view to_string(DynamicsMetric metric);

/// One group's parameter change over one transition.
///
/// consecutive_epoch: the transition ends at (task, epoch); `boundary` marks
/// the (t,N)->(t+1,1) crossings. consecutive_task: `task` is the earlier task
/// t of the pair t->t+1, compared at `epoch`.
struct DynamicsRecord {
  std::string group_id;
  DynamicsMetric metric = DynamicsMetric::consecutive_epoch;
  int task = 0;
  int epoch = 0;
  bool boundary = false;
  double value = 0.0;   // mean over member layers of the per-layer mean |change|
  double spread = 0.0;  // population std over member layers
};

/// (1/len) * sum |v1 - v2|. Throws LengthMismatch / EmptyVector.
double l1_mean_diff(std::span<const double> v1, std::span<const double> v2);

/// Per-group records between adjacent snapshots in stream order. Expects
/// every (t, n) for t = 1..T, n = 1..N; throws MissingSnapshot otherwise.
std::vector<DynamicsRecord> consecutive_epoch_metric(std::span<const ModelSnapshot> snapshots);

/// Per-group change from `from` to `to`, labelled with `to`'s (task, epoch).
std::vector<DynamicsRecord> compare_snapshots(const ModelSnapshot& from, const ModelSnapshot& to,
                                              DynamicsMetric metric = DynamicsMetric::consecutive_epoch);

/// Per-group change between epoch n of task t and epoch n of task t+1.
std::vector<DynamicsRecord> consecutive_task_metric(std::span<const ModelSnapshot> snapshots, int epoch);

struct SensitivityReport {
  std::vector<std::pair<std::string, double>> scores;  // model group order
  std::size_t group_count = 0;
  std::string window;
  SelectionMask mask;  // groups above the default FPF threshold
  double threshold = 1.0;

  double score(std::string_view group) const;
};

inline constexpr double fpf_threshold = 1.0;
inline constexpr double kfpf_threshold = 0.3;

/// S_g = C_g / sum_g' C_g' * G, where C_g is the group's mean dynamics
/// (already averaged over its member layers). Throws AllZeroDynamics when
/// every C_g is zero, ShapeMismatch for negative or non-finite input.
SensitivityReport sensitivity_scores(const std::vector<std::pair<std::string, double>>& group_dynamics,
                                     std::string window = {});

/// Averages record values per group (model order preserved) over a window
/// of consecutive_task records.
std::vector<std::pair<std::string, double>> mean_group_dynamics(std::span<const DynamicsRecord> records);

/// Groups with S_g strictly above `threshold`.
SelectionMask select_sensitive(const SensitivityReport& report, double threshold);

/// Sensitivity from end-of-task snapshots: consecutive_task records at epoch
/// `epoch`, restricted to the first `max_transitions` task pairs (0 = all).
SensitivityReport sensitivity_from_snapshots(std::span<const ModelSnapshot> snapshots, int epoch,
                                             std::size_t max_transitions = 2);

/// Transition positions (indices into the per-transition sequence) whose
/// group-averaged value exceeds spike_factor times the median of the
/// preceding `window` transitions; the global median stands in while fewer
/// than `window` transitions precede. Throws InsufficientHistory with fewer
/// than 2 transitions.
std::vector<std::size_t> detect_boundaries(std::span<const DynamicsRecord> epoch_records, double spike_factor,
                                           std::size_t window);

/// Mean over groups per transition, in stream order.
std::vector<double> aggregate_transitions(std::span<const DynamicsRecord> epoch_records);

/// Header: run_id,metric,group,t,n,value,spread
std::string dynamics_csv(std::string_view run_id, std::span<const DynamicsRecord> records);

}  // namespace forgetlab
