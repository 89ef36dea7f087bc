#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "fedtraj/geo.hpp"

namespace fedtraj::tasks {

using geo::Pt;
using geo::Trajectory;

// T-1 .. T-10
enum class TaskKind { AD, TI, NF, SPD, MM, TUL, TMI, TSim, TSeg, TR };
inline constexpr int kNumTasks = 10;

const char* task_name(TaskKind k);
std::optional<TaskKind> task_from_name(const std::string& name);

struct Classification {
  int label = 0;
};

struct PointsOut {
  std::vector<Pt> points;
};

struct TrajectoryOut {
  Trajectory trajectory;
  // TSeg: per-point flags marking segment starts; empty otherwise
  std::vector<std::uint8_t> boundary_marks;
};

using TaskOutput = std::variant<Classification, PointsOut, TrajectoryOut>;

// classification for AD/TUL/TMI, points for SPD, trajectory for the rest
bool output_matches(TaskKind task, const TaskOutput& output);

struct RoadSegment {
  std::int64_t id = 0;
  double start_lon = 0.0, start_lat = 0.0;
  double stop_lon = 0.0, stop_lat = 0.0;
};

struct RoadNetwork {
  std::vector<RoadSegment> segments;
};

RoadNetwork load_road_csv(const std::string& path);
void save_road_csv(const RoadNetwork& net, const std::string& path);

struct MetricReport {
  TaskKind task = TaskKind::NF;
  std::optional<double> f1;       // all tasks except TSim
  std::optional<double> sed_m;    // TSim only
  std::size_t support = 0;
};

// --- oracles ----------------------------------------------------------

struct StayPointResult {
  std::vector<Pt> representatives;                         // centroid, mid-time
  std::vector<std::pair<std::size_t, std::size_t>> ranges; // [begin, end) per stay
  std::vector<std::uint8_t> member_mask;                   // per input point
};

// maximal subsequences with spatial diameter <= dist_thresh lasting
// >= time_thresh seconds
StayPointResult oracle_stay_points(const Trajectory& traj, double dist_thresh_m, double time_thresh_s);

struct NoiseFilterResult {
  Trajectory filtered;
  std::vector<std::uint8_t> keep;  // per input point
};

// drops interior points whose implied speed from both neighbors exceeds
// speed_thresh
NoiseFilterResult oracle_noise_filter(const Trajectory& traj, double speed_thresh_mps);

struct SimplifyResult {
  Trajectory simplified;
  std::vector<std::uint8_t> kept;  // per input point
};

// Douglas-Peucker on the time-synchronized deviation
SimplifyResult oracle_simplify(const Trajectory& traj, double epsilon_m);

struct MapMatchResult {
  Trajectory snapped;
  std::vector<std::int64_t> segment_ids;  // per point
};

MapMatchResult oracle_map_match(const Trajectory& traj, const RoadNetwork& net);

// inserts linearly interpolated points at the missing timestamps
Trajectory oracle_impute(const Trajectory& observed, const std::vector<std::int64_t>& missing_t);
// same mechanism over longer spans (T-10)
Trajectory oracle_recover(const Trajectory& observed, const std::vector<std::int64_t>& missing_t);

// per-point flags marking segment starts, split at stay ranges
std::vector<std::uint8_t> oracle_segment(const Trajectory& traj, const StayPointResult& stays);

bool oracle_anomaly(const Trajectory& traj, const Trajectory& reference_route, double detour_thresh_m);

enum class SpeedClass { walk = 0, bike = 1, bus = 2, car = 3 };
SpeedClass speed_class(double mean_speed_mps);
int label_tmi(const geo::SynthMeta& meta);
int label_tul(const geo::SynthMeta& meta);

// --- metrics ----------------------------------------------------------

// binary F1 of the positive class (label 1); 0 when P+R = 0
double f1_binary(const std::vector<int>& predicted, const std::vector<int>& truth);
// macro-averaged F1 over n_classes
double f1_macro(const std::vector<int>& predicted, const std::vector<int>& truth, int n_classes);

// mean distance of each original point to its time-synchronized position
// on the simplified polyline; simplified must be a subsequence of original
// sharing both endpoints
double sed(const Trajectory& simplified, const Trajectory& original);

}  // namespace fedtraj::tasks
