#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedtraj/common.hpp"

namespace fedtraj::geo {

struct SpatioTemporalPoint {
  double lon = 0.0;  // degrees, WGS-84
  double lat = 0.0;  // degrees
  std::int64_t t = 0;  // epoch seconds

  bool operator==(const SpatioTemporalPoint&) const = default;
};

using Pt = SpatioTemporalPoint;

bool point_valid(const Pt& p);

// Equirectangular approximation with cos(mean lat) scaling; adequate at
// city scale, which is all the synthetic data covers.
inline constexpr double kEarthRadiusM = 6371000.0;
double dist_m(const Pt& a, const Pt& b);
// distance from p to segment (a, b), projection clamped to the segment
double dist_point_segment_m(const Pt& p, double a_lon, double a_lat, double b_lon, double b_lat);

struct Trajectory {
  std::string traj_id;
  std::string user_id;
  std::vector<Pt> points;
};

// Throws InvariantViolation / NonMonotonicTime.
void validate(const Trajectory& traj);

struct SubTrajectory {
  std::string parent_id;
  int client_id = 0;
  int segment_index = 0;
  std::vector<Pt> points;
};

struct BBox {
  double lon_min = 0.0, lat_min = 0.0, lon_max = 0.0, lat_max = 0.0;

  bool contains(const Pt& p) const {
    return p.lon >= lon_min && p.lon <= lon_max && p.lat >= lat_min && p.lat <= lat_max;
  }
};

// Rectangular lon/lat grid with an explicit cell -> client map. Points
// exactly on an interior cell edge belong to the cell with the larger index.
struct RegionPartition {
  BBox bbox;
  int rows = 1;
  int cols = 1;
  std::vector<int> cell_to_client;  // size rows*cols

  int cell_index(const Pt& p) const;           // PointOutsidePartition if outside bbox
  int client_of(const Pt& p) const;
  int num_clients() const;
};

RegionPartition make_grid_partition(const BBox& bbox, int rows, int cols);

std::vector<SubTrajectory> partition_trajectory(const Trajectory& traj, const RegionPartition& part);
Trajectory reassemble(const std::vector<SubTrajectory>& subs);

enum class CorruptionKind { noise, drop, duplicate, stay_inject, anomaly_detour };

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::noise;
  double rate = 0.0;        // fraction of points affected, [0, 1]
  double magnitude = 0.0;   // meters (noise/anomaly/stay radius) or seconds (stay duration)
  std::uint64_t seed = 0;
};

struct GroundTruth {
  // masks are indexed against the corrupted trajectory's points
  std::vector<std::uint8_t> noise_mask;
  std::vector<std::uint8_t> duplicate_mask;
  // original index and true point of each removed point
  std::vector<std::pair<std::size_t, Pt>> dropped;
  // [begin, end) index ranges of injected stays
  std::vector<std::pair<std::size_t, std::size_t>> stay_ranges;
  bool anomaly = false;
};

std::pair<Trajectory, GroundTruth> corrupt(const Trajectory& traj, const CorruptionSpec& spec);

enum class TravelMode { walk = 0, bike = 1, bus = 2, car = 3 };
const char* mode_name(TravelMode m);

struct SynthMeta {
  int user_index = 0;
  TravelMode mode = TravelMode::walk;
  double mean_speed_mps = 0.0;
};

struct SynthDataset {
  std::vector<Trajectory> trajectories;
  std::vector<SynthMeta> metas;  // parallel to trajectories
};

struct SynthSpec {
  int n_users = 4;
  int n_trajs = 16;
  int points_per_traj = 100;
  BBox bbox{-2.0, -2.0, 2.0, 2.0};
  std::int64_t t_start = 1600000000;
  std::int64_t dt_seconds = 10;
  std::uint64_t seed = 0;
};

SynthDataset synth_generate(const SynthSpec& spec);

std::vector<Trajectory> load_csv(const std::string& path);
void save_csv(const std::vector<Trajectory>& trajs, const std::string& path);

}  // namespace fedtraj::geo
