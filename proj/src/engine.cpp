#include "forgetlab/engine.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "forgetlab/error.hpp"

namespace forgetlab {
namespace {

// Fork keys for the independent random streams of one run.
constexpr std::uint64_t rng_shuffle = 1;
constexpr std::uint64_t rng_buffer = 2;
constexpr std::uint64_t rng_replay = 3;
constexpr std::uint64_t rng_finetune = 4;

std::uint64_t train_flops(const Model& model, std::size_t batch) { return 3 * model.forward_flops(batch); }

struct BatchData {
  std::vector<double> inputs;
  std::vector<int> labels;
  std::vector<double> logits;  // stored z of buffer rows, when present
};

void append_items(BatchData& out, const std::vector<BufferItem>& items, bool need_logits) {
  for (const auto& item : items) {
    out.inputs.insert(out.inputs.end(), item.input.begin(), item.input.end());
    out.labels.push_back(item.label);
    if (need_logits) {
      if (!item.logits) fail(ErrorCode::missing_logits, "buffer item has no stored logits");
      out.logits.insert(out.logits.end(), item.logits->begin(), item.logits->end());
    }
  }
}

// Offers every sample of the batch to the reservoir after the step that
// consumed it; kept items get logits from the current model.
void offer_to_buffer(ReplayBuffer& buffer, Model& model, const StreamBatch& batch, std::uint64_t step,
                     bool capture_logits) {
  const std::size_t n = batch.labels.size();
  if (n == 0) return;
  const std::size_t d = batch.inputs.size() / n;
  std::vector<std::size_t> slots;
  std::vector<BufferItem> items;
  for (std::size_t i = 0; i < n; ++i) {
    const auto slot = buffer.reserve_slot();
    if (!slot) continue;
    slots.push_back(*slot);
    BufferItem item;
    item.input.assign(batch.inputs.begin() + static_cast<std::ptrdiff_t>(i * d),
                      batch.inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    item.label = batch.labels[i];
    item.insertion_step = step;
    items.push_back(std::move(item));
  }
  if (items.empty()) return;
  if (capture_logits) attach_logits(std::span<BufferItem>(items), model);
  for (std::size_t i = 0; i < items.size(); ++i) buffer.store(slots[i], std::move(items[i]));
}

void stream_step(Model& model, const StreamBatch& batch, double lr, FlopsLedger& ledger) {
  const std::size_t n = batch.labels.size();
  Tensor logits = model.forward(batch.inputs, n, Mode::train);
  cross_entropy(logits, batch.labels).backward();
  model.sgd_step(lr);
  ledger.cl_training += train_flops(model, n);
}

ReplayBuffer make_buffer(const TrainConfig& config) {
  return ReplayBuffer(config.buffer_capacity, Rng(config.seed).fork(rng_buffer).next_u64());
}

void end_of_batch(RunOutput& out, const StreamBatch& batch, const RunHooks& hooks) {
  if (!batch.epoch_end || !batch.task || !batch.epoch) return;
  out.snapshots.push_back(out.model.snapshot(*batch.task, *batch.epoch));
  if (hooks.on_epoch_end) hooks.on_epoch_end({out.model, *batch.task, *batch.epoch, out.steps, out.ledger});
}

// Shared loop for the replay-style learners. `step` performs one update.
template <class Step>
RunOutput stream_loop(std::span<const StreamBatch> schedule, Model model, const TrainConfig& config,
                      const RunHooks& hooks, Step step) {
  validate(config);
  RunOutput out{std::move(model), make_buffer(config), {}, {}, 0};
  Rng replay_rng = Rng(config.seed).fork(rng_replay);
  for (const auto& batch : schedule) {
    if (batch.labels.empty()) continue;
    step(out, batch, replay_rng);
    ++out.steps;
    offer_to_buffer(out.buffer, out.model, batch, out.steps, true);
    end_of_batch(out, batch, hooks);
  }
  return out;
}

void check_mask(const Model& model, const SelectionMask& mask) {
  if (mask.empty()) fail(ErrorCode::empty_mask, "finetuning mask selects no group");
  (void)group_fraction(model.groups(), mask);  // throws UnknownGroup
}

}  // namespace

std::string_view to_string(Method method) {
  switch (method) {
    case Method::sgd: return "sgd";
    case Method::er: return "er";
    case Method::der: return "der";
    case Method::gdumb: return "gdumb";
    case Method::kfpf: return "kfpf";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::sgd, Method::er, Method::der, Method::gdumb, Method::kfpf}) {
    if (to_string(m) == name) return m;
  }
  fail(ErrorCode::config_invalid, fmt::format("unknown method '{}'", name));
}

std::string_view to_string(FinetuneObjective objective) {
  return objective == FinetuneObjective::ce ? "ce" : "kd";
}

void validate(const TrainConfig& config) {
  if (!(config.lr > 0.0) || !std::isfinite(config.lr)) fail(ErrorCode::config_invalid, "lr must be > 0");
  if (config.epochs_per_task < 1) fail(ErrorCode::config_invalid, "epochs_per_task must be >= 1");
  if (config.batch_size == 0) fail(ErrorCode::config_invalid, "batch_size must be >= 1");
  const bool replay = config.method == Method::er || config.method == Method::der ||
                      config.method == Method::gdumb || config.method == Method::kfpf;
  if (replay && config.buffer_capacity == 0) {
    fail(ErrorCode::config_invalid, fmt::format("{} needs buffer_capacity > 0", to_string(config.method)));
  }
  if ((config.method == Method::er || config.method == Method::der) && config.replay_batch_size == 0) {
    fail(ErrorCode::config_invalid, "replay_batch_size must be >= 1");
  }
  if (!(config.der_lambda >= 0.0)) fail(ErrorCode::config_invalid, "der_lambda must be >= 0");
}

std::vector<StreamBatch> make_schedule(const Stream& stream, int epochs_per_task, std::size_t batch_size,
                                       std::uint64_t seed) {
  if (epochs_per_task < 1) fail(ErrorCode::config_invalid, "epochs_per_task must be >= 1");
  if (batch_size == 0) fail(ErrorCode::config_invalid, "batch_size must be >= 1");
  Rng rng = Rng(seed).fork(rng_shuffle);
  std::vector<StreamBatch> out;
  for (const auto& split : stream.tasks) {
    const Dataset& data = split.train.data;
    const std::size_t d = data.sample_size();
    for (int epoch = 1; epoch <= epochs_per_task; ++epoch) {
      const auto order = rng.permutation(data.size());
      for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
        const std::size_t end = std::min(order.size(), begin + batch_size);
        StreamBatch b;
        b.inputs.reserve((end - begin) * d);
        for (std::size_t i = begin; i < end; ++i) {
          const auto x = data.sample(order[i]);
          b.inputs.insert(b.inputs.end(), x.begin(), x.end());
          b.labels.push_back(data.labels[order[i]]);
        }
        b.task = split.train.task_index;
        b.epoch = epoch;
        b.epoch_end = end == order.size();
        out.push_back(std::move(b));
      }
    }
  }
  return out;
}

std::vector<StreamBatch> strip_boundaries(std::vector<StreamBatch> schedule) {
  for (auto& b : schedule) {
    b.task.reset();
    b.epoch.reset();
    b.epoch_end = false;
  }
  return schedule;
}

EvalResult evaluate(Model& model, std::span<const TaskDataset> tasks) {
  constexpr std::size_t chunk = 256;
  NoGradGuard guard;
  EvalResult result;
  for (const auto& task : tasks) {
    const Dataset& data = task.data;
    const std::size_t d = data.sample_size();
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
      const std::size_t n = std::min(chunk, data.size() - begin);
      const Tensor logits =
          model.forward(std::span<const double>(data.inputs).subspan(begin * d, n * d), n, Mode::eval);
      const std::size_t C = logits.dim(1);
      const auto z = logits.data();
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = z.subspan(i * C, C);
        const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        if (pred == data.labels[begin + i]) ++correct;
      }
    }
    result.per_task.push_back(data.size() == 0 ? 0.0
                                               : static_cast<double>(correct) / static_cast<double>(data.size()));
  }
  if (!result.per_task.empty()) {
    for (double a : result.per_task) result.average += a;
    result.average /= static_cast<double>(result.per_task.size());
  }
  return result;
}

EvalResult evaluate(Model& model, const Stream& stream, bool validation) {
  std::vector<TaskDataset> tasks;
  tasks.reserve(stream.tasks.size());
  for (const auto& s : stream.tasks) tasks.push_back(validation ? s.val : s.train);
  return evaluate(model, tasks);
}

Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> labels) { return cross_entropy(logits, labels); }

Tensor kd_loss(const Tensor& logits, std::span<const double> stored_logits, std::span<const int> labels,
               double lambda) {
  Tensor ce = cross_entropy(logits, labels);
  if (lambda == 0.0) return ce;
  return add(ce, scale(mse(logits, stored_logits), lambda));
}

double cosine_lr(std::size_t step, std::size_t total_steps, double peak) {
  if (step >= total_steps) {
    fail(ErrorCode::step_out_of_range, fmt::format("step {} outside [0, {})", step, total_steps));
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

RunOutput run_sgd(std::span<const StreamBatch> schedule, Model model, const TrainConfig& config,
                  const RunHooks& hooks) {
  return stream_loop(schedule, std::move(model), config, hooks, [&](RunOutput& out, const StreamBatch& b, Rng&) {
    stream_step(out.model, b, config.lr, out.ledger);
  });
}

RunOutput run_er(std::span<const StreamBatch> schedule, Model model, const TrainConfig& config,
                 const RunHooks& hooks) {
  return stream_loop(schedule, std::move(model), config, hooks,
                     [&](RunOutput& out, const StreamBatch& b, Rng& replay_rng) {
                       if (out.buffer.empty()) {
                         stream_step(out.model, b, config.lr, out.ledger);
                         return;
                       }
                       const auto replayed = out.buffer.sample_batch(config.replay_batch_size, replay_rng);
                       BatchData data{b.inputs, b.labels, {}};
                       append_items(data, replayed, false);
                       Tensor logits = out.model.forward(data.inputs, data.labels.size(), Mode::train);
                       cross_entropy(logits, data.labels).backward();
                       out.model.sgd_step(config.lr);
                       out.ledger.cl_training += train_flops(out.model, b.labels.size());
                       out.ledger.replay += train_flops(out.model, replayed.size());
                     });
}

RunOutput run_der(std::span<const StreamBatch> schedule, Model model, const TrainConfig& config, double lambda,
                  const RunHooks& hooks) {
  if (!(lambda >= 0.0)) fail(ErrorCode::config_invalid, "der lambda must be >= 0");
  return stream_loop(schedule, std::move(model), config, hooks,
                     [&](RunOutput& out, const StreamBatch& b, Rng& replay_rng) {
                       if (out.buffer.empty()) {
                         stream_step(out.model, b, config.lr, out.ledger);
                         return;
                       }
                       const auto replayed = out.buffer.sample_batch(config.replay_batch_size, replay_rng);
                       BatchData data{b.inputs, b.labels, {}};
                       append_items(data, replayed, true);
                       const std::size_t n = b.labels.size();
                       const std::size_t total = data.labels.size();
                       Tensor logits = out.model.forward(data.inputs, total, Mode::train);
                       Tensor loss = cross_entropy(slice_rows(logits, 0, n), b.labels);
                       if (lambda != 0.0) {
                         loss = add(loss, scale(mse(slice_rows(logits, n, total), data.logits), lambda));
                       }
                       loss.backward();
                       out.model.sgd_step(config.lr);
                       out.ledger.cl_training += train_flops(out.model, n);
                       out.ledger.replay += train_flops(out.model, replayed.size());
                     });
}

Rng finetune_rng(std::uint64_t seed, std::size_t pass) { return Rng(seed).fork(rng_finetune).fork(pass); }

void fpf(Model& model, const ReplayBuffer& buffer, const FinetuneConfig& config, Rng& rng, FlopsLedger* ledger) {
  if (buffer.empty()) fail(ErrorCode::empty_buffer, "finetuning on an empty buffer");
  check_mask(model, config.mask);
  const bool kd = config.objective == FinetuneObjective::kd;
  if (kd) {
    for (const auto& item : buffer.items()) {
      if (!item.logits) fail(ErrorCode::missing_logits, "kd finetuning needs stored logits on every item");
    }
  }
  const Mode mode = config.mask.contains(group::bn_stats) ? Mode::train : Mode::frozen_stats;
  const std::size_t n = buffer.size();
  const std::size_t bs = std::min(config.batch_size, n);
  if (bs == 0) fail(ErrorCode::config_invalid, "finetune batch_size must be >= 1");
  auto order = rng.permutation(n);
  std::size_t pos = 0;
  for (std::size_t k = 0; k < config.steps; ++k) {
    if (pos + bs > n) {
      order = rng.permutation(n);
      pos = 0;
    }
    const auto items = buffer.gather(std::span<const std::size_t>(order).subspan(pos, bs));
    pos += bs;
    BatchData data;
    append_items(data, items, kd);
    Tensor logits = model.forward(data.inputs, bs, mode);
    Tensor loss = kd ? kd_loss(logits, data.logits, data.labels, config.kd_lambda)
                     : cross_entropy(logits, data.labels);
    loss.backward();
    model.sgd_step(cosine_lr(k, config.steps, config.peak_lr), config.mask);
    if (ledger) ledger->finetuning += train_flops(model, bs);
  }
}

RunOutput run_gdumb(std::span<const StreamBatch> schedule, Model fresh_model, const TrainConfig& config,
                    const FinetuneConfig& finetune) {
  if (config.buffer_capacity == 0) fail(ErrorCode::empty_buffer, "gdumb with buffer capacity 0");
  validate(config);
  RunOutput out{std::move(fresh_model), make_buffer(config), {}, {}, 0};
  for (const auto& batch : schedule) {
    if (batch.labels.empty()) continue;
    ++out.steps;
    offer_to_buffer(out.buffer, out.model, batch, out.steps, false);
  }
  FinetuneConfig ft = finetune;
  ft.mask = out.model.all_groups();
  ft.objective = FinetuneObjective::ce;
  Rng rng = finetune_rng(config.seed, 0);
  fpf(out.model, out.buffer, ft, rng, &out.ledger);
  return out;
}

KfpfOutput run_kfpf(std::span<const StreamBatch> schedule, Model model, const TrainConfig& train,
                    const KfpfConfig& kfpf, const FinetuneConfig& finetune, const KfpfHooks& hooks) {
  validate(train);
  if (kfpf.tau == 0) fail(ErrorCode::config_invalid, "tau must be >= 1");
  if (kfpf.variant == FinetuneObjective::kd && !(kfpf.lambda >= 0.0)) {
    fail(ErrorCode::config_invalid, "kd lambda must be >= 0");
  }
  KfpfOutput result{RunOutput{std::move(model), make_buffer(train), {}, {}, 0}, {}, std::nullopt, 0, 0};
  RunOutput& out = result.run;
  FinetuneConfig ft = finetune;
  ft.objective = kfpf.variant;
  ft.kd_lambda = kfpf.variant == FinetuneObjective::kd ? kfpf.lambda : 0.0;

  bool identified = kfpf.mask.has_value();
  if (identified) {
    result.mask = *kfpf.mask;
    check_mask(out.model, result.mask);
  }
  const std::size_t identify_at = kfpf.identify_step > 0 ? kfpf.identify_step : kfpf.tau;
  const std::size_t probe_every = std::max<std::size_t>(1, identify_at / std::max<std::size_t>(1, kfpf.probes));
  std::vector<ModelSnapshot> probes;
  if (!identified) probes.push_back(out.model.snapshot(0, 0));

  auto identify = [&] {
    if (identified) return;
    const auto step = static_cast<int>(out.steps);
    if (probes.back().epoch != step) probes.push_back(out.model.snapshot(0, step));
    if (probes.size() < 2) fail(ErrorCode::missing_snapshots, "no SGD steps before sensitivity identification");
    std::vector<DynamicsRecord> records;
    for (std::size_t i = 1; i < probes.size(); ++i) {
      auto r = compare_snapshots(probes[i - 1], probes[i]);
      records.insert(records.end(), r.begin(), r.end());
    }
    auto report = sensitivity_scores(mean_group_dynamics(records), fmt::format("sgd_steps:0-{}", step));
    report.threshold = kfpf.threshold;
    report.mask = select_sensitive(report, kfpf.threshold);
    result.mask = report.mask;
    result.report = std::move(report);
    identified = true;
    probes.clear();
  };

  std::uint64_t fpf_reads = 0;
  auto pass = [&](bool trailing) {
    identify();
    ft.mask = result.mask;
    Rng rng = finetune_rng(train.seed, result.fpf_passes);
    const auto before = out.buffer.read_count();
    fpf(out.model, out.buffer, ft, rng, &out.ledger);
    fpf_reads += out.buffer.read_count() - before;
    if (hooks.on_fpf) hooks.on_fpf({out.model, out.steps, result.fpf_passes, trailing, out.ledger});
    ++result.fpf_passes;
  };

  for (const auto& batch : schedule) {
    if (batch.labels.empty()) continue;
    stream_step(out.model, batch, train.lr, out.ledger);
    ++out.steps;
    if (!identified && out.steps <= identify_at && out.steps % probe_every == 0) {
      probes.push_back(out.model.snapshot(0, static_cast<int>(out.steps)));
    }
    if (out.steps == identify_at) identify();
    if (out.steps % kfpf.tau == 0 && !out.buffer.empty()) pass(false);
    offer_to_buffer(out.buffer, out.model, batch, out.steps, true);
    if (hooks.on_step) hooks.on_step(out.model, out.steps, out.ledger);
  }
  pass(true);
  result.reads_outside_fpf = out.buffer.read_count() - fpf_reads;
  return result;
}

FlopsLedger predict_ledger(const Model& model, Method method, std::uint64_t stream_steps, std::size_t batch,
                           std::size_t replay_batch, std::size_t fpf_passes, std::size_t ft_steps,
                           std::size_t ft_batch) {
  FlopsLedger ledger;
  const std::uint64_t ft = static_cast<std::uint64_t>(ft_steps) * train_flops(model, ft_batch);
  if (method == Method::gdumb) {
    ledger.finetuning = ft;
    return ledger;
  }
  ledger.cl_training = stream_steps * train_flops(model, batch);
  if (method == Method::er || method == Method::der) ledger.replay = stream_steps * train_flops(model, replay_batch);
  ledger.finetuning = static_cast<std::uint64_t>(fpf_passes) * ft;
  return ledger;
}

}  // namespace forgetlab
