#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedtraj/tasks.hpp"

using namespace fedtraj;
using namespace fedtraj::tasks;
using geo::Pt;
using geo::Trajectory;

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kMPerDegLat = geo::kEarthRadiusM * kPi / 180.0;

// build a trajectory from local-meter offsets at lat ~ 0 so hand geometry
// stays exact
Trajectory from_meters(const std::vector<std::array<double, 2>>& xy_m,
                       const std::vector<std::int64_t>& ts) {
  Trajectory t;
  t.traj_id = "t";
  t.user_id = "u";
  for (std::size_t i = 0; i < xy_m.size(); ++i) {
    t.points.push_back(Pt{xy_m[i][0] / kMPerDegLat, xy_m[i][1] / kMPerDegLat, ts[i]});
  }
  return t;
}

}  // namespace

TEST_CASE("stay points: identical points over 600 s yield one stay") {
  Trajectory t;
  t.traj_id = "t";
  for (int i = 0; i <= 6; ++i) t.points.push_back(Pt{1.0, 1.0, i * 100});
  const auto res = oracle_stay_points(t, 100.0, 300.0);
  REQUIRE(res.representatives.size() == 1);
  CHECK(res.representatives[0].lon == doctest::Approx(1.0));
  CHECK(res.representatives[0].lat == doctest::Approx(1.0));
  CHECK(res.representatives[0].t == 300);
  for (auto m : res.member_mask) CHECK(m == 1);
}

TEST_CASE("stay points: a constant 10 m/s line has none") {
  std::vector<std::array<double, 2>> xy;
  std::vector<std::int64_t> ts;
  for (int i = 0; i < 100; ++i) {
    xy.push_back({i * 10.0, 0.0});
    ts.push_back(i);
  }
  const auto t = from_meters(xy, ts);
  CHECK(oracle_stay_points(t, 100.0, 300.0).representatives.empty());
}

TEST_CASE("stay points: cluster then 1 km jump gives the cluster centroid") {
  std::vector<std::array<double, 2>> xy;
  std::vector<std::int64_t> ts;
  for (int i = 0; i < 5; ++i) {
    xy.push_back({i * 2.0, 0.0});  // 5 points within 8 m
    ts.push_back(i * 150);         // spans 600 s
  }
  xy.push_back({1000.0, 0.0});
  ts.push_back(700);
  const auto t = from_meters(xy, ts);
  const auto res = oracle_stay_points(t, 100.0, 300.0);
  REQUIRE(res.representatives.size() == 1);
  CHECK(res.ranges[0] == std::pair<std::size_t, std::size_t>{0, 5});
  CHECK(res.representatives[0].lon == doctest::Approx(4.0 / kMPerDegLat));
}

TEST_CASE("noise filter keeps a clean walk and drops a teleport") {
  std::vector<std::array<double, 2>> xy;
  std::vector<std::int64_t> ts;
  for (int i = 0; i < 10; ++i) {
    xy.push_back({i * 5.0, 0.0});  // 5 m/s
    ts.push_back(i);
  }
  auto clean = from_meters(xy, ts);
  CHECK(oracle_noise_filter(clean, 50.0).filtered.points.size() == 10);

  auto noisy = clean;
  noisy.points[5].lat += 10000.0 / kMPerDegLat;  // 10 km sideways
  const auto res = oracle_noise_filter(noisy, 50.0);
  CHECK(res.keep[5] == 0);
  CHECK(res.filtered.points.size() == 9);
  for (std::size_t i = 0; i < res.keep.size(); ++i) {
    if (i != 5) CHECK(res.keep[i] == 1);
  }
}

TEST_CASE("noise filter returns 2-point trajectories unchanged") {
  const auto t = from_meters({{0, 0}, {10000, 0}}, {0, 1});
  CHECK(oracle_noise_filter(t, 1.0).filtered.points.size() == 2);
}

TEST_CASE("simplify: epsilon 0 keeps every generic point") {
  std::vector<std::array<double, 2>> xy;
  std::vector<std::int64_t> ts;
  for (int i = 0; i < 20; ++i) {
    xy.push_back({i * 10.0, std::sin(i) * 10.0});
    ts.push_back(i);
  }
  const auto t = from_meters(xy, ts);
  CHECK(oracle_simplify(t, 0.0).simplified.points.size() == t.points.size());
}

TEST_CASE("simplify: collinear equally-timed points reduce to endpoints") {
  const auto t = from_meters({{0, 0}, {10, 0}, {20, 0}}, {0, 1, 2});
  const auto res = oracle_simplify(t, 0.5);
  CHECK(res.simplified.points.size() == 2);
  CHECK(res.kept == std::vector<std::uint8_t>{1, 0, 1});
}

TEST_CASE("simplify: huge epsilon keeps exactly the endpoints") {
  std::vector<std::array<double, 2>> xy;
  std::vector<std::int64_t> ts;
  for (int i = 0; i < 30; ++i) {
    xy.push_back({i * 10.0, std::cos(i) * 40.0});
    ts.push_back(i);
  }
  const auto t = from_meters(xy, ts);
  const auto res = oracle_simplify(t, 1e12);
  CHECK(res.simplified.points.size() == 2);
}

TEST_CASE("sed of the identity simplification is zero") {
  std::vector<std::array<double, 2>> xy;
  std::vector<std::int64_t> ts;
  for (int i = 0; i < 10; ++i) {
    xy.push_back({i * 10.0, std::sin(i) * 25.0});
    ts.push_back(i);
  }
  const auto t = from_meters(xy, ts);
  CHECK(sed(t, t) == 0.0);
}

TEST_CASE("sed of a collinear original against endpoints is zero") {
  const auto t = from_meters({{0, 0}, {10, 0}, {20, 0}}, {0, 1, 2});
  Trajectory simp = t;
  simp.points.erase(simp.points.begin() + 1);
  CHECK(sed(simp, t) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("sed matches the hand-computed triangle case") {
  // original (0,0) (1,1) (2,0) degrees at t 0,1,2; simplified = endpoints.
  // the synchronized point at t=1 is (1,0); deviation is one degree of
  // latitude; SED averages it over the 3 original points
  Trajectory orig;
  orig.traj_id = "t";
  orig.points = {Pt{0, 0, 0}, Pt{1, 1, 1}, Pt{2, 0, 2}};
  Trajectory simp;
  simp.traj_id = "t";
  simp.points = {Pt{0, 0, 0}, Pt{2, 0, 2}};
  const double expect = (6371000.0 * kPi / 180.0) / 3.0;
  CHECK(sed(simp, orig) == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("sed rejects a non-subsequence") {
  const auto t = from_meters({{0, 0}, {10, 5}, {20, 0}}, {0, 1, 2});
  Trajectory bogus = t;
  bogus.points[1].lat += 1.0 / kMPerDegLat;
  try {
    sed(bogus, t);
    FAIL("expected NotSubsequence");
  } catch (const Error& e) {
    CHECK(e.code() == Err::NotSubsequence);
  }
}

TEST_CASE("sed is monotone non-decreasing in epsilon (property)") {
  Rng rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::array<double, 2>> xy;
    std::vector<std::int64_t> ts;
    double y = 0.0;
    for (int i = 0; i < 60; ++i) {
      y += rng.uniform(-20.0, 20.0);
      xy.push_back({i * 15.0, y});
      ts.push_back(i * 5);
    }
    const auto t = from_meters(xy, ts);
    double prev_sed = -1.0;
    for (double eps : {0.0, 5.0, 20.0, 80.0, 320.0, 5000.0}) {
      const auto res = oracle_simplify(t, eps);
      const double s = sed(res.simplified, t);
      CHECK(s >= prev_sed - 1e-9);
      prev_sed = s;
    }
  }
}

TEST_CASE("map matching snaps to the nearest segment with id tie-break") {
  RoadNetwork net;
  net.segments = {
      {3, 0.0, 1.0, 1.0, 1.0},   // horizontal at lat 1
      {7, 0.0, -1.0, 1.0, -1.0}, // equidistant mirror
      {9, 0.0, 2.0, 1.0, 2.0},
  };
  Trajectory t;
  t.traj_id = "t";
  t.points = {Pt{0.5, 0.0, 0}};
  const auto res = oracle_map_match(t, net);
  CHECK(res.segment_ids[0] == 3);  // tie between 3 and 7 goes low

  // point on a segment maps to it with zero displacement
  Trajectory on;
  on.traj_id = "t";
  on.points = {Pt{0.5, 1.0, 0}};
  const auto res2 = oracle_map_match(on, net);
  CHECK(res2.segment_ids[0] == 3);
  CHECK(res2.snapped.points[0].lon == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(res2.snapped.points[0].lat == doctest::Approx(1.0).epsilon(1e-12));

  // hand case: point at origin, A spans lat 1, B spans lat 2 -> A
  RoadNetwork ab;
  ab.segments = {{1, 0.0, 1.0, 1.0, 1.0}, {2, 0.0, 2.0, 1.0, 2.0}};
  Trajectory zero;
  zero.traj_id = "t";
  zero.points = {Pt{0.0, 0.0, 0}};
  CHECK(oracle_map_match(zero, ab).segment_ids[0] == 1);
}

TEST_CASE("map matching rejects an empty network") {
  Trajectory t;
  t.points = {Pt{0, 0, 0}};
  try {
    oracle_map_match(t, RoadNetwork{});
    FAIL("expected EmptyNetwork");
  } catch (const Error& e) {
    CHECK(e.code() == Err::EmptyNetwork);
  }
}

TEST_CASE("imputation lerps the gap midpoint and quarter point") {
  Trajectory obs;
  obs.traj_id = "t";
  obs.points = {Pt{0, 0, 0}, Pt{2, 2, 100}};
  const auto mid = oracle_impute(obs, {50});
  REQUIRE(mid.points.size() == 3);
  CHECK(mid.points[1].lon == doctest::Approx(1.0));
  CHECK(mid.points[1].lat == doctest::Approx(1.0));
  const auto quarter = oracle_impute(obs, {25});
  CHECK(quarter.points[1].lon == doctest::Approx(0.5));

  // no gaps -> identity
  CHECK(oracle_impute(obs, {}).points == obs.points);
}

TEST_CASE("imputation rejects timestamps outside the observed span") {
  Trajectory obs;
  obs.points = {Pt{0, 0, 0}, Pt{2, 2, 100}};
  try {
    oracle_impute(obs, {150});
    FAIL("expected UnbracketedGap");
  } catch (const Error& e) {
    CHECK(e.code() == Err::UnbracketedGap);
  }
}

TEST_CASE("segmentation splits at stay ranges; none means one segment") {
  Trajectory t;
  for (int i = 0; i < 10; ++i) t.points.push_back(Pt{i * 0.01, 0.0, i});
  StayPointResult none;
  const auto starts = oracle_segment(t, none);
  CHECK(starts[0] == 1);
  for (std::size_t i = 1; i < starts.size(); ++i) CHECK(starts[i] == 0);

  StayPointResult stays;
  stays.ranges = {{3, 6}};
  const auto marks = oracle_segment(t, stays);
  CHECK(marks[3] == 1);
  CHECK(marks[6] == 1);
}

TEST_CASE("anomaly flag trips only past the detour threshold") {
  std::vector<std::array<double, 2>> xy;
  std::vector<std::int64_t> ts;
  for (int i = 0; i < 10; ++i) {
    xy.push_back({i * 100.0, 0.0});
    ts.push_back(i);
  }
  const auto ref = from_meters(xy, ts);
  CHECK(!oracle_anomaly(ref, ref, 50.0));  // zero deviation

  auto detour = ref;
  for (int i = 4; i < 7; ++i) detour.points[i].lat += 300.0 / kMPerDegLat;
  CHECK(oracle_anomaly(detour, ref, 50.0));
  CHECK(!oracle_anomaly(detour, ref, 1000.0));
}

TEST_CASE("speed classes map onto the configured bands") {
  CHECK(speed_class(1.0) == SpeedClass::walk);
  CHECK(speed_class(4.0) == SpeedClass::bike);
  CHECK(speed_class(10.0) == SpeedClass::bus);  // the hand-checked 10 m/s case
  CHECK(speed_class(20.0) == SpeedClass::car);
  geo::SynthMeta meta{2, geo::TravelMode::bus, 10.0};
  CHECK(label_tmi(meta) == static_cast<int>(SpeedClass::bus));
  CHECK(label_tul(meta) == 2);
}

TEST_CASE("binary f1 on perfect, inverted and mixed predictions") {
  CHECK(f1_binary({1, 0, 1}, {1, 0, 1}) == 1.0);
  CHECK(f1_binary({0, 1, 0}, {1, 0, 1}) == 0.0);
  // TP=1, FP=1, FN=1 -> 0.5
  CHECK(f1_binary({1, 1, 0}, {1, 0, 1}) == doctest::Approx(0.5));
}

TEST_CASE("macro f1 is symmetric under a consistent label permutation") {
  const std::vector<int> truth{0, 1, 2, 1, 0, 2, 2};
  const std::vector<int> pred{0, 2, 2, 1, 0, 1, 2};
  const double base = f1_macro(pred, truth, 3);
  // apply permutation 0->1, 1->2, 2->0 to both
  auto perm = [](int x) { return (x + 1) % 3; };
  std::vector<int> truth_p, pred_p;
  for (int v : truth) truth_p.push_back(perm(v));
  for (int v : pred) pred_p.push_back(perm(v));
  CHECK(f1_macro(pred_p, truth_p, 3) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("f1 rejects mismatched lengths") {
  try {
    f1_binary({1}, {1, 0});
    FAIL("expected LengthMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::LengthMismatch);
  }
}

TEST_CASE("task outputs carry the variant their format demands") {
  CHECK(output_matches(TaskKind::AD, TaskOutput{Classification{1}}));
  CHECK(output_matches(TaskKind::TUL, TaskOutput{Classification{3}}));
  CHECK(output_matches(TaskKind::SPD, TaskOutput{PointsOut{}}));
  CHECK(output_matches(TaskKind::NF, TaskOutput{TrajectoryOut{}}));
  CHECK(output_matches(TaskKind::TSeg, TaskOutput{TrajectoryOut{}}));
  CHECK(!output_matches(TaskKind::SPD, TaskOutput{Classification{0}}));
  CHECK(!output_matches(TaskKind::NF, TaskOutput{PointsOut{}}));
}

TEST_CASE("oracles recover injected corruption at 10x thresholds (calibration)") {
  geo::SynthSpec spec;
  spec.seed = 77;
  spec.n_trajs = 4;
  spec.points_per_traj = 120;
  const auto data = geo::synth_generate(spec);

  // noise: sigma 10x the displacement a 5 m/s threshold needs at dt=10
  for (const auto& traj : data.trajectories) {
    geo::CorruptionSpec cs;
    cs.kind = geo::CorruptionKind::noise;
    cs.rate = 0.05;
    cs.magnitude = 5000.0;
    cs.seed = 123;
    const auto [noisy, gt] = geo::corrupt(traj, cs);
    const auto res = oracle_noise_filter(noisy, 50.0);
    for (std::size_t i = 1; i + 1 < noisy.points.size(); ++i) {
      // isolated injected points are exactly the dropped ones
      const bool isolated = gt.noise_mask[i] && !gt.noise_mask[i - 1] && !gt.noise_mask[i + 1];
      if (isolated) CHECK(res.keep[i] == 0);
      if (!gt.noise_mask[i] && !gt.noise_mask[i - 1] && !gt.noise_mask[i + 1])
        CHECK(res.keep[i] == 1);
    }
  }

  // stays: dwell radius 10x under the distance threshold, duration 10x over
  for (const auto& traj : data.trajectories) {
    geo::CorruptionSpec cs;
    cs.kind = geo::CorruptionKind::stay_inject;
    cs.rate = 0.3;
    cs.magnitude = 10.0;
    cs.seed = 9;
    const auto [stayed, gt] = geo::corrupt(traj, cs);
    REQUIRE(gt.stay_ranges.size() == 1);
    const auto res = oracle_stay_points(stayed, 100.0, 60.0);
    REQUIRE(res.representatives.size() >= 1);
    // the injected range is covered by detected members
    const auto [b, e] = gt.stay_ranges[0];
    std::size_t covered = 0;
    for (std::size_t i = b; i < e; ++i) covered += res.member_mask[i];
    CHECK(static_cast<double>(covered) >= 0.9 * static_cast<double>(e - b));
  }
}
