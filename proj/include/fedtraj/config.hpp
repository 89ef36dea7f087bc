#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedtraj/common.hpp"
#include "fedtraj/geo.hpp"
#include "fedtraj/tasks.hpp"

namespace fedtraj::cfg {

// sectioned key=value text; '#' starts a comment; unknown keys are rejected
class IniFile {
 public:
  static IniFile parse_file(const std::string& path);
  static IniFile parse_string(const std::string& text);

  bool has(const std::string& section, const std::string& key) const;
  std::string get_str(const std::string& section, const std::string& key,
                      const std::string& fallback) const;
  std::int64_t get_int(const std::string& section, const std::string& key,
                       std::int64_t fallback) const;
  double get_f64(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

  // every (section, key) pair must appear in the schema
  void validate(const std::map<std::string, std::vector<std::string>>& schema) const;

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

enum class SparseScope { adapter, all };
enum class AggMode { eq8, fedavg };

struct RunConfig {
  // dataset
  int n_users = 8;
  int n_trajs = 32;
  int points_per_traj = 120;
  // city-scale window (~11 km x 11 km) so trajectories actually cross
  // region boundaries
  geo::BBox bbox{-0.05, -0.05, 0.05, 0.05};
  std::int64_t t_start = 1600000000;
  std::int64_t dt_seconds = 10;
  std::uint64_t data_seed = 42;
  double test_fraction = 0.25;
  double noise_rate = 0.15;
  double noise_sigma_m = 1000.0;  // displacements dwarf legitimate speeds
  double stay_rate = 0.2;         // dwell window fraction; must outlast spd_time_thresh_s
  double stay_radius_m = 15.0;
  double drop_rate = 0.1;
  std::string csv_path;    // optional: load raw trajectories instead of synthesizing
  std::string roads_path;  // optional road network

  // partition
  int grid_rows = 2;
  int grid_cols = 2;

  // tasks
  std::vector<tasks::TaskKind> train_tasks{tasks::TaskKind::NF, tasks::TaskKind::SPD,
                                           tasks::TaskKind::TSim};
  std::vector<tasks::TaskKind> eval_tasks{tasks::TaskKind::NF, tasks::TaskKind::SPD,
                                          tasks::TaskKind::TSim};
  double nf_speed_thresh = 30.0;  // above any legitimate mode, below typical noise jumps
  double spd_dist_thresh_m = 100.0;
  double spd_time_thresh_s = 120.0;
  double tsim_epsilon_m = 200.0;
  double ad_detour_thresh_m = 500.0;

  // models
  int llm_layers = 8;
  int slm_layers = 4;
  int width = 64;
  int lora_rank = 4;
  int adapter_depth = 2;
  int segment_slots = 8;

  // training
  int clients = 4;
  int rounds = 50;
  int freeze_period = 2;
  double m_ratio = 0.25;
  SparseScope sparse_scope = SparseScope::adapter;
  AggMode agg_mode = AggMode::eq8;
  double lr_tpa = 3e-3;
  double lr_slm = 1e-2;
  double lr_llm = 1e-2;
  int batch_points = 128;
  int local_steps = 4;  // optimizer steps per model per round
  std::uint64_t session_seed = 7;
  std::uint64_t seed = 1234;
  double client_w1 = 1.0, client_w2 = 1.0, client_w3 = 1.0;
  double server_w1 = 1.0, server_w2 = 1.0;

  // output
  std::string out_dir = "out";
  bool write_json = true;
};

RunConfig load_run_config(const std::string& path);
RunConfig run_config_from_ini(const IniFile& ini);
std::string describe(const RunConfig& config);  // canonical key=value echo for reports

}  // namespace fedtraj::cfg
