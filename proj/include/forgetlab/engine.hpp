#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forgetlab/dynamics.hpp"
#include "forgetlab/nn.hpp"
#include "forgetlab/replay.hpp"
#include "forgetlab/streams.hpp"

namespace forgetlab {

enum class Method { sgd, er, der, gdumb, kfpf };

std::string_view to_string(Method method);
Method parse_method(std::string_view name);

struct TrainConfig {
  Method method = Method::sgd;
  double lr = 0.05;
  std::size_t batch_size = 32;
  std::size_t replay_batch_size = 32;
  int epochs_per_task = 5;
  std::size_t buffer_capacity = 200;
  double der_lambda = 0.5;
  std::uint64_t seed = 0;
};

/// Throws ConfigInvalid on lr <= 0, N < 1, zero batch, or a replay method
/// without buffer capacity.
void validate(const TrainConfig& config);

enum class FinetuneObjective { ce, kd };

std::string_view to_string(FinetuneObjective objective);

struct FinetuneConfig {
  SelectionMask mask;
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  double peak_lr = 0.05;
  FinetuneObjective objective = FinetuneObjective::ce;
  double kd_lambda = 0.0;
};

struct KfpfConfig {
  std::size_t tau = 100;
  FinetuneObjective variant = FinetuneObjective::ce;
  double lambda = 0.5;  // ignored for the ce variant
  /// SGD step at which sensitive groups are identified; 0 means at the
  /// first trigger (step tau).
  std::size_t identify_step = 0;
  /// Skips identification when set.
  std::optional<SelectionMask> mask;
  double threshold = kfpf_threshold;
  /// Parameter probes taken before identification (evenly spaced).
  std::size_t probes = 4;
};

/// Cumulative training FLOPs by purpose. Backward counts as twice forward,
/// including masked finetuning. Logit capture for buffered items and
/// evaluation are not training FLOPs and are not counted.
struct FlopsLedger {
  std::uint64_t cl_training = 0;
  std::uint64_t replay = 0;
  std::uint64_t finetuning = 0;

  std::uint64_t total() const { return cl_training + replay + finetuning; }
  friend bool operator==(const FlopsLedger&, const FlopsLedger&) = default;
};

/// One mini-batch of the stream. Task/epoch annotations are only used for
/// snapshots and logging; k-FPF never reads them.
struct StreamBatch {
  std::vector<double> inputs;
  std::vector<int> labels;
  std::optional<int> task;
  std::optional<int> epoch;
  bool epoch_end = false;
};

/// Tasks in order, N epochs each, training samples reshuffled per epoch.
std::vector<StreamBatch> make_schedule(const Stream& stream, int epochs_per_task, std::size_t batch_size,
                                       std::uint64_t seed);
/// Removes every task/epoch annotation.
std::vector<StreamBatch> strip_boundaries(std::vector<StreamBatch> schedule);

struct EvalResult {
  std::vector<double> per_task;
  double average = 0.0;
};

/// Accuracy by argmax over all classes (no task oracle), per task split.
EvalResult evaluate(Model& model, std::span<const TaskDataset> tasks);
EvalResult evaluate(Model& model, const Stream& stream, bool validation = true);

/// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> labels);

/// CE(labels, logits) + lambda * mean((stored - logits)^2). lambda == 0
/// returns the plain cross-entropy node.
Tensor kd_loss(const Tensor& logits, std::span<const double> stored_logits, std::span<const int> labels,
               double lambda);

/// peak * 0.5 * (1 + cos(pi * step / total)); throws StepOutOfRange unless
/// 0 <= step < total.
double cosine_lr(std::size_t step, std::size_t total_steps, double peak);

struct EpochEvent {
  const Model& model;
  int task;
  int epoch;
  std::uint64_t step;
  const FlopsLedger& ledger;
};

struct RunHooks {
  std::function<void(const EpochEvent&)> on_epoch_end;
};

struct RunOutput {
  Model model;
  ReplayBuffer buffer;
  std::vector<ModelSnapshot> snapshots;
  FlopsLedger ledger;
  std::uint64_t steps = 0;
};

RunOutput run_sgd(std::span<const StreamBatch> schedule, Model model, const TrainConfig& config,
                  const RunHooks& hooks = {});
RunOutput run_er(std::span<const StreamBatch> schedule, Model model, const TrainConfig& config,
                 const RunHooks& hooks = {});
/// Loss = CE(stream rows) + lambda * MSE(stored z, logits of buffer rows).
RunOutput run_der(std::span<const StreamBatch> schedule, Model model, const TrainConfig& config, double lambda,
                  const RunHooks& hooks = {});
/// Streams into the reservoir without training, then fits `fresh_model` on
/// the buffer alone (all groups, cosine schedule). Throws EmptyBuffer.
RunOutput run_gdumb(std::span<const StreamBatch> schedule, Model fresh_model, const TrainConfig& config,
                    const FinetuneConfig& finetune);

/// RNG for the `pass`-th finetuning pass of a run seeded with `seed`.
Rng finetune_rng(std::uint64_t seed, std::size_t pass);

/// K steps of masked SGD on buffer batches with cosine-annealed lr. The
/// buffer is walked in reshuffled order, one permutation per pass over it.
/// BN statistics update only when BN_STATS is in the mask. Throws
/// EmptyBuffer, EmptyMask, MissingLogits (kd objective).
void fpf(Model& model, const ReplayBuffer& buffer, const FinetuneConfig& config, Rng& rng,
         FlopsLedger* ledger = nullptr);

struct FpfEvent {
  const Model& model;
  std::uint64_t step;
  std::size_t pass;
  bool trailing;
  const FlopsLedger& ledger;
};

struct KfpfHooks {
  std::function<void(const FpfEvent&)> on_fpf;
  /// After each SGD step (and any pass it triggered); `step` is 1-based.
  std::function<void(const Model&, std::uint64_t step, const FlopsLedger&)> on_step;
};

struct KfpfOutput {
  RunOutput run;
  SelectionMask mask;
  std::optional<SensitivityReport> report;  // when identified online
  std::size_t fpf_passes = 0;
  std::uint64_t reads_outside_fpf = 0;
};

/// Plain SGD on the stream; every tau steps (and once at the end) runs fpf
/// on a reservoir the SGD steps never read. Ignores task annotations.
KfpfOutput run_kfpf(std::span<const StreamBatch> schedule, Model model, const TrainConfig& train,
                    const KfpfConfig& kfpf, const FinetuneConfig& finetune, const KfpfHooks& hooks = {});

/// Expected ledger under the FLOPs model for `stream_steps` full batches.
/// replay_batch applies to er/der; fpf_passes to kfpf and fpf add-ons.
FlopsLedger predict_ledger(const Model& model, Method method, std::uint64_t stream_steps, std::size_t batch,
                           std::size_t replay_batch, std::size_t fpf_passes, std::size_t ft_steps,
                           std::size_t ft_batch);

}  // namespace forgetlab
