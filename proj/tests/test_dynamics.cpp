#include <doctest.h>

#include <cmath>
#include <numeric>

#include "forgetlab/dynamics.hpp"
#include "forgetlab/error.hpp"
#include "forgetlab/rng.hpp"

using namespace forgetlab;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::bad_format;
}

// Two groups: "A" with two layers of 2 values, "B" with one layer of 3 values.
ModelSnapshot snap(int t, int n, double a, double b) {
  ModelSnapshot s{t, n, {}};
  s.groups.push_back({"A", {{0, {a, a}}, {1, {2 * a, 2 * a}}}});
  s.groups.push_back({"B", {{2, {b, b, b}}}});
  return s;
}

}  // namespace

TEST_CASE("l1_mean_diff closed form and errors") {
  const std::vector<double> a{1, 2, 3}, b{1, 0, 6};
  CHECK(l1_mean_diff(a, b) == doctest::Approx(5.0 / 3.0));
  CHECK(l1_mean_diff(a, a) == 0.0);
  CHECK(code_of([&] { l1_mean_diff(a, std::vector<double>{1}); }) == ErrorCode::length_mismatch);
  CHECK(code_of([] { l1_mean_diff(std::vector<double>{}, std::vector<double>{}); }) == ErrorCode::empty_vector);
}

TEST_CASE("group value is the mean of per-layer means, spread their population std") {
  const auto recs = compare_snapshots(snap(1, 1, 0, 0), snap(1, 2, 1, 4));
  REQUIRE(recs.size() == 2);
  // layer 0 moves 1, layer 1 moves 2
  CHECK(recs[0].group_id == "A");
  CHECK(recs[0].value == doctest::Approx(1.5));
  CHECK(recs[0].spread == doctest::Approx(0.5));
  CHECK(recs[1].value == doctest::Approx(4.0));
  CHECK(recs[1].spread == 0.0);
  CHECK(recs[0].task == 1);
  CHECK(recs[0].epoch == 2);
}

TEST_CASE("epoch metric walks the grid and marks task boundaries") {
  std::vector<ModelSnapshot> snaps;
  double x = 0;
  for (int t = 1; t <= 3; ++t) {
    for (int n = 1; n <= 2; ++n) snaps.push_back(snap(t, n, x += 1, x));
  }
  const auto recs = consecutive_epoch_metric(snaps);
  // 5 transitions x 2 groups
  CHECK(recs.size() == 10);
  std::size_t boundaries = 0;
  for (const auto& r : recs) boundaries += r.boundary;
  CHECK(boundaries == 4);
  CHECK(recs.front().task == 1);
  CHECK(recs.front().epoch == 2);

  snaps.erase(snaps.begin() + 3);
  CHECK(code_of([&] { consecutive_epoch_metric(snaps); }) == ErrorCode::missing_snapshot);
}

TEST_CASE("task metric compares the same epoch of consecutive tasks") {
  std::vector<ModelSnapshot> snaps{snap(1, 1, 0, 0), snap(1, 2, 1, 1), snap(2, 1, 5, 5), snap(2, 2, 3, 1)};
  const auto recs = consecutive_task_metric(snaps, 2);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].metric == DynamicsMetric::consecutive_task);
  CHECK(recs[0].value == doctest::Approx(3.0));  // layers move 2 and 4
  CHECK(recs[1].value == doctest::Approx(0.0));
}

TEST_CASE("sensitivity scores normalize to the group count") {
  const auto r = sensitivity_scores({{"X", 3.0}, {"Y", 1.0}});
  CHECK(r.score("X") == doctest::Approx(1.5));
  CHECK(r.score("Y") == doctest::Approx(0.5));
  CHECK(r.mask == SelectionMask{"X"});
  CHECK(select_sensitive(r, 0.3) == SelectionMask{"X", "Y"});
  CHECK(code_of([&] { r.score("Z"); }) == ErrorCode::unknown_group);
  CHECK(code_of([] { sensitivity_scores({{"X", 0.0}, {"Y", 0.0}}); }) == ErrorCode::all_zero_dynamics);
  CHECK(code_of([] { sensitivity_scores({{"X", -1.0}, {"Y", 2.0}}); }) != ErrorCode::all_zero_dynamics);
}

TEST_CASE("sensitivity scores: sum equals G and scaling dynamics leaves them unchanged") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const auto G = static_cast<std::size_t>(rng.uniform_int(1, 8));
    std::vector<std::pair<std::string, double>> dyn;
    for (std::size_t g = 0; g < G; ++g) dyn.emplace_back("g" + std::to_string(g), rng.uniform() + (g == 0 ? 1e-3 : 0));
    const auto r = sensitivity_scores(dyn);
    double sum = 0;
    for (const auto& [g, s] : r.scores) sum += s;
    CHECK(sum == doctest::Approx(static_cast<double>(G)).epsilon(1e-12));

    const double k = 0.01 + 100 * rng.uniform();
    auto scaled = dyn;
    for (auto& [g, c] : scaled) c *= k;
    const auto r2 = sensitivity_scores(scaled);
    for (std::size_t i = 0; i < G; ++i) CHECK(r2.scores[i].second == doctest::Approx(r.scores[i].second).epsilon(1e-12));
    CHECK(r2.mask == r.mask);
  }
}

TEST_CASE("sensitivity from snapshots limits the transition window") {
  std::vector<ModelSnapshot> snaps{snap(1, 1, 0, 0), snap(2, 1, 1, 1), snap(3, 1, 2, 2), snap(4, 1, 100, 3)};
  const auto two = sensitivity_from_snapshots(snaps, 1, 2);
  // A moves 1.5 per transition, B moves 1
  CHECK(two.score("A") == doctest::Approx(2 * 1.5 / 2.5));
  CHECK(two.window == "consecutive_task@epoch1:tasks1-3");
  const auto all = sensitivity_from_snapshots(snaps, 1, 0);
  CHECK(all.score("A") > two.score("A"));
  CHECK(code_of([&] { sensitivity_from_snapshots(std::span(snaps).first(1), 1); }) == ErrorCode::missing_snapshots);
}

TEST_CASE("boundary detection flags spikes against a trailing median") {
  std::vector<DynamicsRecord> recs;
  // one group, 12 transitions; spikes at 4 and 9
  for (int i = 0; i < 12; ++i) {
    const double v = (i == 4 || i == 9) ? 10.0 : 1.0 + 0.01 * i;
    recs.push_back({"A", DynamicsMetric::consecutive_epoch, i / 5 + 1, i % 5 + 1, false, v, 0.0});
  }
  CHECK(detect_boundaries(recs, 5.0, 4) == std::vector<std::size_t>{4, 9});
  CHECK(detect_boundaries(recs, 20.0, 4).empty());
  CHECK(aggregate_transitions(recs).size() == 12);
  CHECK(code_of([&] { detect_boundaries(std::span(recs).first(1), 5.0, 4); }) == ErrorCode::insufficient_history);
}

TEST_CASE("dynamics CSV layout") {
  const auto recs = compare_snapshots(snap(1, 1, 0, 0), snap(1, 2, 1, 4));
  const auto csv = dynamics_csv("run", recs);
  CHECK(csv.rfind("run_id,metric,group,t,n,value,spread\n", 0) == 0);
  CHECK(csv.find("run,consecutive_epoch,A,1,2,1.5,0.5\n") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
