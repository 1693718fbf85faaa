// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 on any
// failure. Slow criteria (4, 5, 7) train real models.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>

#include <unistd.h>

#include <fmt/format.h>
#include <json.hpp>

#include "forgetlab/binary_io.hpp"
#include "forgetlab/checkpoint.hpp"
#include "forgetlab/config.hpp"
#include "forgetlab/dynamics.hpp"
#include "forgetlab/engine.hpp"
#include "forgetlab/runner.hpp"
#include "support.hpp"

using namespace forgetlab;
using nlohmann::json;

namespace {

// ---- pinned tolerances and sizes -------------------------------------------

constexpr int grad_trials = 50;
constexpr double grad_tol = 1e-4;
constexpr double grad_budget_s = 30.0;

constexpr std::size_t reservoir_capacity = 50;
constexpr std::size_t reservoir_stream = 10000;
constexpr std::size_t reservoir_trials = 2000;
constexpr double reservoir_alpha = 0.01;
constexpr double reservoir_budget_s = 60.0;

constexpr double score_sum_tol = 1e-9;

constexpr int seeds = 5;
constexpr int rank_min_seeds = 4;
constexpr double ranking_budget_s = 600.0;

constexpr double sgd_ceiling = 0.35;
constexpr double fpf_gain = 0.20;
constexpr double kfpf_gap = 0.10;
constexpr double kd_slack = 0.02;
constexpr double sweep_budget_s = 1200.0;

constexpr double er_ratio_tol = 0.05;
constexpr double kfpf_ratio_max = 0.6;
// 50,000 training samples, 5 epochs, batch 32.
constexpr std::uint64_t reference_steps = 5 * ((50000 + 31) / 32);

constexpr double spike_factor = 5.0;
constexpr int boundary_min_seeds = 4;

constexpr double kd_tol = 1e-9;

// ---- helpers ---------------------------------------------------------------

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

fs::path scratch_dir() {
  static const fs::path dir = [] {
    auto p = fs::temp_directory_path() / fmt::format("forgetlab-acceptance-{}", ::getpid());
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

// Upper tail of the chi-square distribution for odd degrees of freedom.
double chi2_sf_odd(double x, int k) {
  double term = std::sqrt(2.0 * x / std::numbers::pi) * std::exp(-x / 2.0);
  double sum = 0.0;
  for (int r = 1; r <= (k - 1) / 2; ++r) {
    sum += term;
    term *= x / (2.0 * r + 1.0);
  }
  return std::erfc(std::sqrt(x / 2.0)) + sum;
}

// Upper tail for even degrees of freedom.
double chi2_sf_even(double x, int k) {
  double term = 1.0, sum = 0.0;
  for (int i = 0; i < k / 2; ++i) {
    sum += term;
    term *= (x / 2.0) / (i + 1.0);
  }
  return std::exp(-x / 2.0) * sum;
}

double chi2_sf(double x, int k) { return k % 2 == 1 ? chi2_sf_odd(x, k) : chi2_sf_even(x, k); }

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// ---- criterion 1 -------------------------------------------------------------

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  std::map<std::string, double> worst;
  auto run = [&](const std::string& name, std::uint64_t seed, auto make) {
    Rng rng(seed);
    double w = 0.0;
    for (int i = 0; i < grad_trials; ++i) {
      auto [fn, inputs] = make(rng);
      w = std::max(w, testing::gradcheck(fn, inputs, rng));
    }
    worst[name] = w;
  };
  auto rint = [](Rng& r, int lo, int hi) { return static_cast<std::size_t>(r.uniform_int(lo, hi)); };

  run("dense", 101, [&](Rng& r) {
    auto layer = std::make_shared<Dense>(rint(r, 1, 5), rint(r, 1, 5));
    layer->weight = testing::random_tensor(r, layer->weight.shape());
    layer->bias = testing::random_tensor(r, layer->bias.shape());
    Tensor x = testing::random_tensor(r, {rint(r, 1, 4), layer->weight.dim(0)});
    return std::pair{testing::OpFn([layer](auto& in) { return layer->forward(in[0], Mode::train); }),
                     std::vector{x, layer->weight, layer->bias}};
  });
  run("conv2d", 102, [&](Rng& r) {
    const auto c = rint(r, 1, 3), o = rint(r, 1, 3), k = rint(r, 1, 3), hw = rint(r, 3, 5);
    auto layer = std::make_shared<Conv2d>(c, o, k, rint(r, 1, 2), rint(r, 0, 1));
    layer->weight = testing::random_tensor(r, layer->weight.shape());
    Tensor x = testing::random_tensor(r, {rint(r, 1, 2), c, hw, hw});
    return std::pair{testing::OpFn([layer](auto& in) { return layer->forward(in[0], Mode::train); }),
                     std::vector{x, layer->weight}};
  });
  run("batchnorm-train", 103, [&](Rng& r) {
    const auto c = rint(r, 1, 4);
    auto layer = std::make_shared<BatchNorm>(c, 0.1, 1e-5);
    layer->gamma = testing::random_tensor(r, {c});
    layer->beta = testing::random_tensor(r, {c});
    Shape shape = r.uniform() < 0.5 ? Shape{rint(r, 2, 5), c} : Shape{2, c, rint(r, 1, 3), rint(r, 1, 3)};
    Tensor x = testing::random_tensor(r, shape);
    return std::pair{testing::OpFn([layer](auto& in) { return layer->forward(in[0], Mode::train); }),
                     std::vector{x, layer->gamma, layer->beta}};
  });
  run("softmax-ce", 104, [&](Rng& r) {
    const auto n = rint(r, 1, 4), C = rint(r, 2, 6);
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(r.uniform_int(0, static_cast<std::int64_t>(C) - 1));
    return std::pair{testing::OpFn([labels](auto& in) { return cross_entropy(in[0], labels); }),
                     std::vector{testing::random_tensor(r, {n, C}, true, 2.0)}};
  });
  run("kd-mse", 105, [&](Rng& r) {
    const auto n = rint(r, 1, 4), C = rint(r, 2, 6);
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(r.uniform_int(0, static_cast<std::int64_t>(C) - 1));
    std::vector<double> z(n * C);
    for (auto& v : z) v = r.normal();
    const double lambda = 0.1 + r.uniform();
    return std::pair{testing::OpFn([=](auto& in) { return kd_loss(in[0], z, labels, lambda); }),
                     std::vector{testing::random_tensor(r, {n, C})}};
  });

  const double elapsed = seconds_since(t0);
  double w = 0.0;
  std::string parts;
  for (const auto& [name, e] : worst) {
    w = std::max(w, e);
    parts += fmt::format(" {}={:.1e}", name, e);
  }
  return {w < grad_tol && elapsed < grad_budget_s,
          fmt::format("{} trials each, worst rel err{} (tol {:.0e}), {:.1f}s", grad_trials, parts, grad_tol, elapsed)};
}

// ---- criterion 2 -------------------------------------------------------------

Outcome reservoir_uniformity() {
  const auto t0 = Clock::now();
  constexpr std::size_t deciles = 10;
  std::vector<double> counts(deciles, 0.0);
  bool size_law = true;
  for (std::size_t trial = 0; trial < reservoir_trials; ++trial) {
    ReplayBuffer buf(reservoir_capacity, Rng(7).fork(trial).next_u64());
    for (std::size_t i = 0; i < reservoir_stream; ++i) {
      buf.insert(BufferItem{{}, 0, std::nullopt, i});
      size_law &= buf.size() == std::min(i + 1, reservoir_capacity);
    }
    for (const auto& it : buf.items()) counts[it.insertion_step * deciles / reservoir_stream] += 1.0;
  }
  const double expected = static_cast<double>(reservoir_trials * reservoir_capacity) / deciles;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  const double p = chi2_sf(chi2, deciles - 1);
  const double elapsed = seconds_since(t0);
  return {size_law && p > reservoir_alpha && elapsed < reservoir_budget_s,
          fmt::format("chi2={:.2f} (df 9) p={:.3f} > {}, size law {}, {:.1f}s", chi2, p, reservoir_alpha,
                      size_law ? "held at every step" : "VIOLATED", elapsed)};
}

// ---- criterion 3 -------------------------------------------------------------

Outcome sensitivity_normalization() {
  Rng rng(31);
  double worst_sum = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto G = static_cast<std::size_t>(rng.uniform_int(1, 12));
    std::vector<std::pair<std::string, double>> dyn;
    for (std::size_t g = 0; g < G; ++g) dyn.emplace_back(fmt::format("g{}", g), std::exp(4.0 * rng.normal()));
    const auto r = sensitivity_scores(dyn);
    double s = 0.0;
    for (const auto& [g, v] : r.scores) s += v;
    worst_sum = std::max(worst_sum, std::abs(s - static_cast<double>(G)));
  }
  const auto two = sensitivity_scores({{"A", 3.0}, {"B", 1.0}});
  const bool closed = std::abs(two.score("A") - 1.5) < 1e-12 && std::abs(two.score("B") - 0.5) < 1e-12;

  // Snapshots of a real model drifting over 4 tasks, then scaled by c.
  ModelSpec spec;
  spec.arch = Arch::cnn_bn;
  spec.input_shape = {1, 8, 8};
  Rng init(5);
  Model model = build_model(spec, init);
  std::vector<ModelSnapshot> snaps;
  for (int t = 1; t <= 4; ++t) {
    ModelSnapshot s = model.snapshot(t, 1);
    for (auto& g : s.groups) {
      const double drift = 0.01 * (1 + static_cast<double>(g.group_id.size() % 5));
      for (auto& l : g.layers) {
        for (auto& v : l.values) v += drift * t * rng.normal();
      }
    }
    snaps.push_back(std::move(s));
  }
  const auto base = sensitivity_from_snapshots(snaps, 1, 0);
  bool invariant = true;
  double worst_shift = 0.0;
  for (double c : {1e-3, 0.37, 2.5, 1e4, -3.0}) {
    auto scaled = snaps;
    for (auto& s : scaled) {
      for (auto& g : s.groups) {
        for (auto& l : g.layers) {
          for (auto& v : l.values) v *= c;
        }
      }
    }
    const auto r = sensitivity_from_snapshots(scaled, 1, 0);
    for (std::size_t i = 0; i < r.scores.size(); ++i) {
      worst_shift = std::max(worst_shift, std::abs(r.scores[i].second - base.scores[i].second));
    }
    invariant &= r.mask == base.mask && select_sensitive(r, kfpf_threshold) == select_sensitive(base, kfpf_threshold);
  }
  invariant &= worst_shift < 1e-9;
  return {worst_sum < score_sum_tol && closed && invariant,
          fmt::format("max |sum S - G| = {:.1e} over 1000 draws, [3,1] -> [{}, {}], scale shift {:.1e}, masks {}",
                      worst_sum, two.score("A"), two.score("B"), worst_shift, invariant ? "unchanged" : "CHANGED")};
}

// ---- CNN runs for criteria 4 and 7 ------------------------------------------

json cnn_config(bool domain, int seed) {
  json stream{{"tasks", 4}, {"dim", 64}, {"image_shape", {1, 8, 8}}, {"per_class", 500}};
  if (domain) {
    stream["mode"] = "domain_il";
  } else {
    stream["class_chunks"] = {3, 3, 2, 2};
  }
  return json{{"method", "sgd"},
              {"seed", seed},
              {"stream", stream},
              {"model", {{"arch", "CNN_BN"}}},
              {"train", {{"lr", 0.05}, {"epochs_per_task", 5}, {"buffer_capacity", 0}}}};
}

// Same construction as the train command, snapshots kept in memory.
std::vector<ModelSnapshot> cnn_snapshots(bool domain, int seed) {
  const RunConfig config = parse_run_config(cnn_config(domain, seed));
  const Stream stream = build_stream(config.stream);
  Rng init = Rng(config.seed).fork(100);
  Model model = build_model(model_spec_for(config, stream), init);
  const auto schedule = make_schedule(stream, config.train.epochs_per_task, config.train.batch_size, config.seed);
  return run_sgd(schedule, std::move(model), config.train).snapshots;
}

struct CnnRuns {
  std::vector<std::vector<ModelSnapshot>> class_il, domain_il;
  double seconds = 0.0;
};

const CnnRuns& cnn_runs() {
  static const CnnRuns runs = [] {
    const auto t0 = Clock::now();
    CnnRuns r;
    for (int s = 0; s < seeds; ++s) {
      r.class_il.push_back(cnn_snapshots(false, s));
      r.domain_il.push_back(cnn_snapshots(true, s));
    }
    r.seconds = seconds_since(t0);
    return r;
  }();
  return runs;
}

// 1-based rank of each group by mean C_g over every task transition at epoch N.
std::map<std::string, int> group_ranks(const std::vector<ModelSnapshot>& snaps, int epoch) {
  const auto report = sensitivity_from_snapshots(snaps, epoch, 0);
  auto scores = report.scores;
  std::stable_sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::map<std::string, int> ranks;
  for (std::size_t i = 0; i < scores.size(); ++i) ranks[scores[i].first] = static_cast<int>(i + 1);
  return ranks;
}

Outcome ranking_reproduction() {
  const auto& runs = cnn_runs();
  int top2 = 0;
  std::vector<double> class_rank, domain_rank;
  std::string per_seed;
  for (int s = 0; s < seeds; ++s) {
    const auto rc = group_ranks(runs.class_il[static_cast<std::size_t>(s)], 5);
    const auto rd = group_ranks(runs.domain_il[static_cast<std::size_t>(s)], 5);
    const bool ok = std::max(rc.at(std::string(group::bn_stats)), rc.at(std::string(group::fc_last))) == 2;
    top2 += ok;
    class_rank.push_back(rc.at(std::string(group::fc_last)));
    domain_rank.push_back(rd.at(std::string(group::fc_last)));
    per_seed += fmt::format(" s{}:{}/{}", s, rc.at(std::string(group::bn_stats)), rc.at(std::string(group::fc_last)));
  }
  const double mc = mean(class_rank), md = mean(domain_rank);
  return {top2 >= rank_min_seeds && md > mc && runs.seconds < ranking_budget_s,
          fmt::format("BN_STATS/FC_LAST ranks{} -> top-2 in {}/{} seeds; FC_LAST mean rank class-IL {:.1f} < "
                      "domain-IL {:.1f}; {:.0f}s",
                      per_seed, top2, seeds, mc, md, runs.seconds)};
}

// ---- criterion 5 (and the ordering property) ----------------------------------

struct SweepMeans {
  std::map<std::string, double> acc;
  std::map<std::string, std::vector<double>> per_seed;
  std::vector<std::string> failures;
  double seconds = 0.0;
};

const SweepMeans& table_sweep() {
  static const SweepMeans means = [] {
    const auto t0 = Clock::now();
    const std::string bn_last = "BN_AFFINE,BN_STATS,FC_LAST";
    json tree{{"name", "table"},
              {"base",
               {{"model", {{"arch", "MLP_BN"}}},
                {"stream", {{"dim", 32}, {"sep", 4.0}}},
                {"train", {{"lr", 0.05}, {"buffer_capacity", 200}}},
                {"fpf", {{"mask", bn_last}, {"steps", 300}, {"peak_lr", 0.1}}},
                {"kfpf", {{"mask", bn_last}, {"steps", 100}, {"passes", 5}, {"peak_lr", 0.1}}}}},
              {"seeds", {0, 1, 2, 3, 4}},
              {"cells",
               {{{"name", "sgd"}, {"method", "sgd"}},
                {{"name", "sgd+fpf"}, {"method", "sgd"}, {"fpf", true}},
                {{"name", "er"}, {"method", "er"}},
                {{"name", "er+fpf"}, {"method", "er"}, {"fpf", true}},
                {{"name", "kfpf-ce"}, {"method", "kfpf"}},
                {{"name", "kfpf-kd"}, {"method", "kfpf"}, {"variant", "kd"}},
                {{"name", "gdumb"}, {"method", "gdumb"}}}}};
    SweepMeans m;
    const auto rows = cmd_sweep(parse_sweep(tree), scratch_dir(), 1);
    for (const auto& r : rows) {
      if (!r.ok) {
        m.failures.push_back(fmt::format("{}-s{}: {}", r.cell, r.seed, r.error));
        continue;
      }
      m.per_seed[r.cell].push_back(r.avg_acc);
    }
    for (const auto& [cell, v] : m.per_seed) m.acc[cell] = mean(v);
    m.seconds = seconds_since(t0);
    return m;
  }();
  return means;
}

Outcome forgetting_and_fpf() {
  const auto& m = table_sweep();
  if (!m.failures.empty()) return {false, "runs failed: " + m.failures.front()};
  const double sgd = m.acc.at("sgd"), sgd_fpf = m.acc.at("sgd+fpf"), er = m.acc.at("er"),
               er_fpf = m.acc.at("er+fpf"), kce = m.acc.at("kfpf-ce"), kkd = m.acc.at("kfpf-kd");
  const bool a = sgd < sgd_ceiling;
  const bool b = sgd_fpf >= sgd + fpf_gain;
  const bool c = er_fpf >= er;
  const bool d = std::abs(kce - er_fpf) <= kfpf_gap && kce >= sgd + fpf_gain;
  const bool e = kkd >= kce - kd_slack;
  auto mark = [](bool ok) { return ok ? "ok" : "NO"; };
  return {a && b && c && d && e && m.seconds < sweep_budget_s,
          fmt::format("SGD {:.3f}<{} [{}]; SGD+FPF {:.3f} [{}]; ER {:.3f} <= FPF+ER {:.3f} [{}]; k-FPF-CE {:.3f} [{}]; "
                      "k-FPF-KD {:.3f} [{}]; {:.0f}s",
                      sgd, sgd_ceiling, mark(a), sgd_fpf, mark(b), er, er_fpf, mark(c), kce, mark(d), kkd, mark(e),
                      m.seconds)};
}

// ---- criterion 6 -------------------------------------------------------------

Model reference_mlp() {
  ModelSpec spec;
  spec.arch = Arch::mlp_bn;
  Rng rng(0);
  return build_model(spec, rng);
}

Outcome efficiency() {
  const auto t0 = Clock::now();
  const Model m = reference_mlp();
  const auto S = reference_steps;
  const auto sgd = predict_ledger(m, Method::sgd, S, 32, 32, 0, 0, 32);
  const auto er = predict_ledger(m, Method::er, S, 32, 32, 0, 0, 32);
  const auto kfpf = predict_ledger(m, Method::kfpf, S, 32, 32, 5, 100, 32);
  const double er_ratio = static_cast<double>(er.total()) / static_cast<double>(sgd.total());
  const double k_ratio = static_cast<double>(kfpf.total()) / static_cast<double>(er.total());
  const double elapsed = seconds_since(t0);
  return {std::abs(er_ratio - 2.0) <= 2.0 * er_ratio_tol && k_ratio < kfpf_ratio_max && elapsed < 1.0,
          fmt::format("{} steps x batch 32: ER/SGD = {:.3f}, k-FPF(k=5,K=100)/ER = {:.3f} < {}", S, er_ratio, k_ratio,
                      kfpf_ratio_max)};
}

// Measured ledgers from real runs; reported alongside criterion 6.
std::string efficiency_measured() {
  StreamSpec s;
  const Stream stream = build_stream(s);
  Model m = reference_mlp();
  const auto sched = make_schedule(stream, 5, 32, 0);
  TrainConfig tc;
  tc.buffer_capacity = 200;
  tc.method = Method::sgd;
  const auto sgd = run_sgd(sched, m, tc);
  tc.method = Method::er;
  const auto er = run_er(sched, m, tc);
  tc.method = Method::kfpf;
  KfpfConfig kc;
  kc.tau = sched.size() / 5 + 1;
  kc.mask = SelectionMask{"BN_AFFINE", "BN_STATS", "FC_LAST"};
  FinetuneConfig ft;
  ft.steps = 100;
  const auto k = run_kfpf(sched, m, tc, kc, ft);
  return fmt::format("{} steps on the default stream: ER/SGD = {:.3f}, k-FPF/ER = {:.3f} ({} passes)", sched.size(),
                     static_cast<double>(er.ledger.total()) / static_cast<double>(sgd.ledger.total()),
                     static_cast<double>(k.run.ledger.total()) / static_cast<double>(er.ledger.total()),
                     k.fpf_passes);
}

// ---- criterion 7 -------------------------------------------------------------

Outcome boundary_detection() {
  const auto& runs = cnn_runs();
  int exact = 0;
  std::string per_seed;
  for (int s = 0; s < seeds; ++s) {
    const auto records = consecutive_epoch_metric(runs.class_il[static_cast<std::size_t>(s)]);
    // transition index of every record flagged as crossing a task boundary
    std::vector<std::size_t> truth;
    std::pair<int, int> prev{-1, -1};
    std::size_t index = 0;
    for (const auto& r : records) {
      if (std::pair{r.task, r.epoch} != prev) {
        if (prev.first != -1) ++index;
        prev = {r.task, r.epoch};
        if (r.boundary) truth.push_back(index);
      }
    }
    const auto found = detect_boundaries(records, spike_factor, 4);
    exact += found == truth && truth.size() == 3;
    std::string f;
    for (auto i : found) f += fmt::format("{}{}", f.empty() ? "" : ",", i);
    per_seed += fmt::format(" s{}:[{}]", s, f);
  }
  return {exact >= boundary_min_seeds,
          fmt::format("true boundaries at transitions 4,9,14; detected{} -> exact in {}/{} seeds", per_seed, exact,
                      seeds)};
}

// ---- criterion 8 -------------------------------------------------------------

Outcome isolation_and_replay_free() {
  StreamSpec ss;
  ss.per_class = 60;
  const Stream stream = build_stream(ss);
  const auto sched = make_schedule(stream, 2, 32, 1);

  // fpf isolation over every non-empty group subset, MLP_BN and CNN_BN
  std::size_t masks = 0;
  bool isolated = true;
  for (Arch arch : {Arch::mlp_bn, Arch::cnn_bn}) {
    ModelSpec spec;
    spec.arch = arch;
    spec.input_shape = arch == Arch::cnn_bn ? Shape{1, 4, 4} : Shape{16};
    Rng rng(2);
    Model model = build_model(spec, rng);
    ReplayBuffer buf(64, 3);
    const auto& d = stream.tasks[0].train.data;
    for (std::size_t i = 0; i < d.size(); ++i) {
      buf.insert(attach_logits(BufferItem{{d.sample(i).begin(), d.sample(i).end()}, d.labels[i], std::nullopt, i}, model));
    }
    const auto ids = model.all_groups().groups();
    const std::vector<std::string> all(ids.begin(), ids.end());
    const auto before = model.snapshot(0, 0);
    for (std::size_t bits = 1; bits < (1U << all.size()); ++bits) {
      SelectionMask mask;
      for (std::size_t g = 0; g < all.size(); ++g) {
        if (bits & (1U << g)) mask.insert(all[g]);
      }
      for (auto objective : {FinetuneObjective::ce, FinetuneObjective::kd}) {
        Model copy = model;
        FinetuneConfig ft{mask, 5, 16, 0.1, objective, 0.5};
        Rng frng(bits);
        fpf(copy, buf, ft, frng);
        const auto after = copy.snapshot(0, 0);
        for (const auto& g : before.groups) {
          if (!mask.contains(g.group_id)) isolated &= g == after.group(g.group_id);
        }
        ++masks;
      }
    }
  }

  // k-FPF: no reads outside passes; identical output without boundary metadata
  ModelSpec spec;
  spec.arch = Arch::mlp_bn;
  Rng rng(4);
  const Model model = build_model(spec, rng);
  TrainConfig tc;
  tc.method = Method::kfpf;
  tc.seed = 9;
  FinetuneConfig ft;
  ft.steps = 20;
  bool replay_free = true, invariant = true;
  for (auto variant : {FinetuneObjective::ce, FinetuneObjective::kd}) {
    KfpfConfig kc;
    kc.tau = 25;
    kc.variant = variant;
    const auto a = run_kfpf(sched, model, tc, kc, ft);
    const auto b = run_kfpf(strip_boundaries(sched), model, tc, kc, ft);
    replay_free &= a.reads_outside_fpf == 0 && a.run.ledger.replay == 0;
    invariant &= a.run.model.snapshot(0, 0) == b.run.model.snapshot(0, 0) && a.mask == b.mask &&
                 a.run.ledger == b.run.ledger && a.run.buffer == b.run.buffer;
  }
  return {isolated && replay_free && invariant,
          fmt::format("{} fpf masks isolated: {}; reads outside fpf = 0: {}; boundary-stripped run identical: {}",
                      masks, isolated, replay_free, invariant)};
}

// ---- criterion 9 -------------------------------------------------------------

Outcome reproducibility() {
  const fs::path root = scratch_dir() / "repro";
  bool same_metrics = true, ckpt_ok = true, buffer_ok = true;
  std::string methods;
  for (const std::string method : {"er", "kfpf", "der"}) {
    json c{{"method", method},
           {"seed", 11},
           {"stream", {{"per_class", 60}}},
           {"train", {{"epochs_per_task", 2}, {"buffer_capacity", 50}}},
           {"fpf", {{"enabled", method == "er"}, {"steps", 30}}},
           {"kfpf", {{"steps", 20}}}};
    const auto first = cmd_train(parse_run_config(c), root / "a");
    const auto again = cmd_train(load_config_file((first.run_dir / "manifest.json").string()), root / "b");
    same_metrics &= read_file((first.run_dir / "metrics.csv").string()) ==
                    read_file((again.run_dir / "metrics.csv").string());
    for (const auto& entry : fs::directory_iterator(first.run_dir / "checkpoints")) {
      const auto bytes = read_file(entry.path().string());
      const auto ck = decode_checkpoint(bytes);
      ckpt_ok &= encode_checkpoint(ck.model, ck.task, ck.epoch) == bytes;
    }
    const auto buf = read_file((first.run_dir / "buffer.bin").string());
    buffer_ok &= ReplayBuffer::decode(buf).encode() == buf;
    methods += " " + method;
  }
  return {same_metrics && ckpt_ok && buffer_ok,
          fmt::format("manifest reruns ({}) byte-identical metrics.csv: {}; checkpoints round-trip: {}; buffer "
                      "round-trip: {}",
                      methods.substr(1), same_metrics, ckpt_ok, buffer_ok)};
}

// ---- criterion 10 ------------------------------------------------------------

Outcome kd_closed_form() {
  const double v = kd_loss(Tensor({1, 2}, {0.0, 0.0}), std::vector<double>{1.0, -1.0}, std::vector<int>{0}, 0.5).item();
  const double expected = std::numbers::ln2 + 0.5;
  Rng rng(12);
  bool identical = true;
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = testing::random_tensor(rng, {4, 5});
    const Tensor b(a.shape(), std::vector<double>(a.data().begin(), a.data().end()), true);
    std::vector<double> z(20);
    for (auto& x : z) x = rng.normal();
    const std::vector<int> labels{0, 4, 2, 2};
    const Tensor l1 = kd_loss(a, z, labels, 0.0);
    const Tensor l2 = cross_entropy(b, labels);
    l1.backward();
    l2.backward();
    identical &= l1.item() == l2.item() &&
                 std::equal(a.grad().begin(), a.grad().end(), b.grad().begin(), b.grad().end());
  }
  return {std::abs(v - expected) < kd_tol && identical,
          fmt::format("kd_loss = {:.12f}, ln2 + 0.5 = {:.12f}; lambda=0 value and gradient bit-identical: {}", v,
                      expected, identical)};
}

// ---- ordering property ---------------------------------------------------------

void ordering_property(bool& all_ok) {
  const auto& m = table_sweep();
  if (!m.failures.empty()) return;
  const double sgd = m.acc.at("sgd"), gd = m.acc.at("gdumb"), er = m.acc.at("er"), er_fpf = m.acc.at("er+fpf"),
               kce = m.acc.at("kfpf-ce"), kkd = m.acc.at("kfpf-kd");
  const bool held = sgd < gd && gd < er && er < er_fpf && kce <= kkd + kd_slack;
  all_ok &= held;
  std::cout << fmt::format("ordering    {}  SGD {:.3f} < GDUMB {:.3f} < ER {:.3f} < FPF+ER {:.3f}; k-FPF-CE {:.3f} <= "
                           "k-FPF-KD {:.3f} + {}\n",
                           held ? "PASS" : "FAIL", sgd, gd, er, er_fpf, kce, kkd, kd_slack);
  std::cout << fmt::format("ordering    INFO  ER {:.3f} < k-FPF-CE {:.3f}: {}; GDUMB {:.3f} < k-FPF-CE: {} "
                           "(not reproduced at this scale when false)\n",
                           er, kce, er < kce ? "holds" : "does not hold", gd, gd < kce ? "holds" : "does not hold");
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient oracle", gradient_oracle},
      {"reservoir uniformity", reservoir_uniformity},
      {"sensitivity normalization", sensitivity_normalization},
      {"ranking reproduction", ranking_reproduction},
      {"forgetting and FPF delta", forgetting_and_fpf},
      {"efficiency", efficiency},
      {"boundary detection", boundary_detection},
      {"isolation and replay-free", isolation_and_replay_free},
      {"reproducibility", reproducibility},
      {"KD closed form", kd_closed_form},
  };
  bool all_ok = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, fmt::format("threw: {}", e.what())};
    }
    all_ok &= o.pass;
    std::cout << fmt::format("criterion {:<2} {}  {}: {}\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first,
                             o.detail)
              << std::flush;
    if (i + 1 == 6) {
      try {
        std::cout << "criterion 6  INFO  " << efficiency_measured() << "\n";
      } catch (const std::exception& e) {
        std::cout << "criterion 6  INFO  measured run threw: " << e.what() << "\n";
      }
    }
  }
  try {
    ordering_property(all_ok);
  } catch (const std::exception& e) {
    all_ok = false;
    std::cout << "ordering    FAIL  threw: " << e.what() << "\n";
  }
  fs::remove_all(scratch_dir());
  std::cout << (all_ok ? "acceptance: all criteria passed\n" : "acceptance: FAILED\n");
  return all_ok ? 0 : 1;
}
