#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedtraj/config.hpp"
#include "fedtraj/geo.hpp"
#include "fedtraj/model.hpp"
#include "fedtraj/secure_agg.hpp"
#include "fedtraj/tasks.hpp"
#include "fedtraj/tke.hpp"
#include "fedtraj/tpa.hpp"

namespace fedtraj::fpo {

using tasks::TaskKind;

struct FreezeSchedule {
  int period = 2;  // round r is frozen iff r mod period != 0, so round 0 is always fresh

  bool is_frozen(int round) const;
};

enum class Route { local, cross_client };

// how many neighbors on each side the task's context needs
int task_context_window(TaskKind task);
// cross-client iff any point of the context window lives on another client
Route route_task(std::span<const int> client_of_point, int point_index, int context_window);

// shared output vocabulary: spatial grid cells | class labels | {keep, drop}
// | segment-id slots
struct VocabLayout {
  int grid_rows = 16;
  int grid_cols = 16;
  int n_classes = 4;
  int seg_slots = 8;
  geo::BBox bbox;

  int size() const { return grid_rows * grid_cols + n_classes + 2 + seg_slots; }
  int cell_base() const { return 0; }
  int class_base() const { return grid_rows * grid_cols; }
  int binary_base() const { return class_base() + n_classes; }
  int seg_base() const { return binary_base() + 2; }
  int cell_token(const geo::Pt& p) const;
};

struct RoundComm {
  bool frozen = false;
  std::size_t embedding_up = 0;   // client -> server encoded points
  std::size_t result_up = 0;      // client -> server output distributions
  std::size_t result_down = 0;    // server -> client results
  std::size_t lora_up = 0;        // client -> server adapter LoRA
  std::size_t adapter_down = 0;   // server -> client adapter dispatches
  std::size_t tpa_agg = 0;        // decentralized TPA aggregation traffic
};

struct CommLedger {
  std::vector<RoundComm> rounds;

  RoundComm totals() const;
};

struct ClientRoundLog {
  double l1 = 0.0, l2 = 0.0, l3 = 0.0;
  std::vector<int> selected;
  std::vector<double> ratios;
};

struct ServerRoundLog {
  double l1 = 0.0, l2 = 0.0;
  std::vector<int> selected;
  std::vector<double> ratios;
};

struct RoundLog {
  int round = 0;
  bool frozen = false;
  std::vector<ClientRoundLog> clients;
  ServerRoundLog server;
};

struct TaskMetric {
  TaskKind task = TaskKind::NF;
  std::optional<double> f1;
  std::optional<double> sed_m;
  std::optional<double> oracle_sed_m;
  std::optional<double> all_positive_f1;  // baseline for binary tasks
  std::size_t support = 0;
  bool seen_in_training = false;
};

struct RunResult {
  std::vector<RoundLog> rounds;
  CommLedger ledger;
  std::vector<TaskMetric> metrics;
  std::vector<std::vector<double>> final_tpa;  // flattened per client
  std::string report_json;  // full run report (timestamp isolated in header.created)
  std::string out_dir;      // empty when nothing was written
};

// sum of the configured per-task losses
double multi_task_loss(std::span<const double> per_task_losses);

RunResult run_training(const cfg::RunConfig& config);

// rebuilds the dataset from the config and scores a saved SLM on the test
// split (the single-model view of the federation)
std::vector<TaskMetric> evaluate_checkpoint(const cfg::RunConfig& config,
                                            const std::string& slm_bin,
                                            const std::string& slm_manifest,
                                            const std::vector<TaskKind>& eval_tasks);

// dataset generation for the gen-data command: writes train/test CSVs and a
// synthetic road network
struct GeneratedPaths {
  std::string train_csv, test_csv, roads_csv;
};
GeneratedPaths generate_dataset_files(const cfg::RunConfig& config, const std::string& out_dir);

}  // namespace fedtraj::fpo
