#include "fedtraj/harness.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <ctime>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <set>
#include <thread>
#include <tuple>

#include <json.hpp>

#include "fedtraj/kernels.hpp"

namespace fedtraj::fpo {

using json = nlohmann::ordered_json;
using geo::Pt;

bool FreezeSchedule::is_frozen(int round) const {
  if (round < 0) fail(Err::ConfigError, "round must be >= 0");
  return round % period != 0;
}

int task_context_window(TaskKind task) {
  switch (task) {
    case TaskKind::NF:
    case TaskKind::SPD:
    case TaskKind::TSim:
    case TaskKind::TSeg:
    case TaskKind::TI:
    case TaskKind::TR:
      return 1;
    case TaskKind::MM:
    case TaskKind::AD:
    case TaskKind::TUL:
    case TaskKind::TMI:
      return 0;
  }
  return 0;
}

Route route_task(std::span<const int> client_of_point, int point_index, int context_window) {
  const int n = static_cast<int>(client_of_point.size());
  if (point_index < 0 || point_index >= n) fail(Err::ConfigError, "point index out of range");
  const int own = client_of_point[static_cast<std::size_t>(point_index)];
  const int lo = std::max(0, point_index - context_window);
  const int hi = std::min(n - 1, point_index + context_window);
  for (int i = lo; i <= hi; ++i) {
    if (client_of_point[static_cast<std::size_t>(i)] != own) return Route::cross_client;
  }
  return Route::local;
}

int VocabLayout::cell_token(const Pt& p) const {
  const double cell_w = (bbox.lon_max - bbox.lon_min) / grid_cols;
  const double cell_h = (bbox.lat_max - bbox.lat_min) / grid_rows;
  int col = static_cast<int>(std::floor((p.lon - bbox.lon_min) / cell_w));
  int row = static_cast<int>(std::floor((p.lat - bbox.lat_min) / cell_h));
  col = std::clamp(col, 0, grid_cols - 1);
  row = std::clamp(row, 0, grid_rows - 1);
  return cell_base() + row * grid_cols + col;
}

RoundComm CommLedger::totals() const {
  RoundComm total;
  for (const auto& r : rounds) {
    total.embedding_up += r.embedding_up;
    total.result_up += r.result_up;
    total.result_down += r.result_down;
    total.lora_up += r.lora_up;
    total.adapter_down += r.adapter_down;
    total.tpa_agg += r.tpa_agg;
  }
  return total;
}

double multi_task_loss(std::span<const double> per_task_losses) {
  if (per_task_losses.empty()) fail(Err::ConfigError, "multi_task_loss needs at least one task");
  return kernels::sum(per_task_losses.data(), per_task_losses.size());
}

// ---------------------------------------------------------------------------
// dataset preparation
// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kPointFeatureLen = 9;
constexpr double kDistScaleM = 500.0;
constexpr double kSpeedScaleMps = 50.0;
constexpr double kDevScaleM = 200.0;

struct Slot {
  int parent = 0;
  std::int64_t t = 0;
  int point_index = -1;  // -1 for gap (imputation/recovery) slots
  int label = -1;        // vocab token; -1 when only the server may know it
  bool pooled = false;
  int seg_begin = 0, seg_end = 0;  // pooled slots: point range of the segment
};

struct ParentData {
  geo::Trajectory clean;
  geo::Trajectory observed;  // stay + detour + noise corrupted
  geo::GroundTruth gt;
  geo::SynthMeta meta;
  tke::WeatherInfo weather;
  std::vector<int> client_of_point;
  bool is_test = false;

  std::vector<std::int64_t> missing_ts;
  std::vector<int> missing_labels;
  std::vector<std::uint8_t> missing_is_tr;
  std::vector<std::uint8_t> dropped_mask;

  std::map<TaskKind, std::vector<int>> labels;
};

struct Dataset {
  std::vector<ParentData> parents;
  std::vector<int> train_parents, test_parents;
  geo::RegionPartition partition;
  tpa::Normalization norm;
  VocabLayout vocab;
  tasks::RoadNetwork roads;
};

tasks::RoadNetwork default_grid_roads(const geo::BBox& bbox) {
  // four horizontal and four vertical streets, ids 0..7
  tasks::RoadNetwork net;
  for (int i = 0; i < 4; ++i) {
    const double lat = bbox.lat_min + (bbox.lat_max - bbox.lat_min) * (0.2 + 0.2 * i);
    net.segments.push_back({i, bbox.lon_min, lat, bbox.lon_max, lat});
  }
  for (int i = 0; i < 4; ++i) {
    const double lon = bbox.lon_min + (bbox.lon_max - bbox.lon_min) * (0.2 + 0.2 * i);
    net.segments.push_back({4 + i, lon, bbox.lat_min, lon, bbox.lat_max});
  }
  return net;
}

bool task_trained(const cfg::RunConfig& config, TaskKind task) {
  return std::find(config.train_tasks.begin(), config.train_tasks.end(), task) !=
         config.train_tasks.end();
}

bool task_wanted(const cfg::RunConfig& config, TaskKind task) {
  return task_trained(config, task) ||
         std::find(config.eval_tasks.begin(), config.eval_tasks.end(), task) !=
             config.eval_tasks.end();
}

Dataset prepare_dataset(const cfg::RunConfig& config) {
  Dataset ds;
  // corruption can displace points beyond the generation window; the working
  // bbox pads it far enough (6 sigma of noise plus the bounded dwell/detour
  // shifts) that displaced points still fall inside the partition
  geo::BBox work_bbox = config.bbox;
  {
    const double margin_m = 6.0 * config.noise_sigma_m +
                            2.0 * (config.ad_detour_thresh_m * 1.5 + config.stay_radius_m);
    const double mean_lat =
        0.5 * (config.bbox.lat_min + config.bbox.lat_max) * 3.14159265358979323846 / 180.0;
    const double per_deg = geo::kEarthRadiusM * 3.14159265358979323846 / 180.0;
    const double pad = margin_m / (per_deg * std::max(0.2, std::cos(mean_lat)));
    work_bbox.lon_min -= pad;
    work_bbox.lat_min -= pad;
    work_bbox.lon_max += pad;
    work_bbox.lat_max += pad;
  }
  ds.partition = geo::make_grid_partition(work_bbox, config.grid_rows, config.grid_cols);
  for (auto& cell : ds.partition.cell_to_client) cell = cell % config.clients;

  geo::SynthDataset synth;
  if (!config.csv_path.empty()) {
    synth.trajectories = geo::load_csv(config.csv_path);
    for (const auto& traj : synth.trajectories) {
      double total = 0.0;
      for (std::size_t p = 1; p < traj.points.size(); ++p)
        total += geo::dist_m(traj.points[p - 1], traj.points[p]);
      const double span = static_cast<double>(traj.points.back().t - traj.points.front().t);
      int user = 0;
      if (traj.user_id.size() > 1) user = std::atoi(traj.user_id.c_str() + 1);
      synth.metas.push_back({user, geo::TravelMode::walk, span > 0 ? total / span : 0.0});
    }
  } else {
    geo::SynthSpec spec;
    spec.n_users = config.n_users;
    spec.n_trajs = config.n_trajs;
    spec.points_per_traj = config.points_per_traj;
    spec.bbox = config.bbox;
    spec.t_start = config.t_start;
    spec.dt_seconds = config.dt_seconds;
    spec.seed = config.data_seed;
    synth = geo::synth_generate(spec);
  }
  if (synth.trajectories.empty()) fail(Err::ConfigError, "dataset is empty");

  ds.norm.bbox = work_bbox;
  std::int64_t t_lo = synth.trajectories.front().points.front().t;
  std::int64_t t_hi = t_lo + 1;
  for (const auto& traj : synth.trajectories) {
    t_lo = std::min(t_lo, traj.points.front().t);
    t_hi = std::max(t_hi, traj.points.back().t);
  }
  ds.norm.t_min = t_lo;
  ds.norm.t_max = t_hi;

  ds.vocab.bbox = work_bbox;
  ds.vocab.n_classes = std::max(4, config.n_users);
  ds.vocab.seg_slots = config.segment_slots;

  ds.roads = config.roads_path.empty() ? default_grid_roads(config.bbox)
                                       : tasks::load_road_csv(config.roads_path);

  const int test_every =
      config.test_fraction > 0.0
          ? std::max(2, static_cast<int>(std::llround(1.0 / config.test_fraction)))
          : 0;

  for (std::size_t pi = 0; pi < synth.trajectories.size(); ++pi) {
    ParentData parent;
    parent.clean = synth.trajectories[pi];
    parent.meta = pi < synth.metas.size() ? synth.metas[pi] : geo::SynthMeta{};
    parent.is_test = test_every > 0 && static_cast<int>(pi) % test_every == test_every - 1;

    Rng wr(hash_mix(config.data_seed, 0x776561 /*"wea"*/, pi));
    parent.weather.cond = static_cast<tke::Weather>(wr.uniform_int(0, 3));
    parent.weather.temp_c = wr.uniform(-5.0, 35.0);

    // corruption pipeline: noise, a possible detour, then the dwell, which
    // overwrites its window (so injected stays are clean clusters and the
    // noise flags inside them are retired); point counts never change, so
    // masks stay aligned
    geo::Trajectory cur = parent.clean;
    {
      geo::CorruptionSpec cs{geo::CorruptionKind::noise, config.noise_rate, config.noise_sigma_m,
                             hash_mix(config.data_seed, 1, pi)};
      auto [next, gt] = geo::corrupt(cur, cs);
      parent.gt.noise_mask = gt.noise_mask;
      cur = std::move(next);
    }
    {
      geo::CorruptionSpec cs{geo::CorruptionKind::anomaly_detour, 0.25,
                             config.ad_detour_thresh_m * 1.5, hash_mix(config.data_seed, 2, pi)};
      auto [next, gt] = geo::corrupt(cur, cs);
      parent.gt.anomaly = gt.anomaly;
      cur = std::move(next);
    }
    {
      geo::CorruptionSpec cs{geo::CorruptionKind::stay_inject, config.stay_rate,
                             config.stay_radius_m, hash_mix(config.data_seed, 3, pi)};
      auto [next, gt] = geo::corrupt(cur, cs);
      parent.gt.stay_ranges = gt.stay_ranges;
      for (const auto& [begin, end] : gt.stay_ranges) {
        for (std::size_t k = begin; k < end && k < parent.gt.noise_mask.size(); ++k)
          parent.gt.noise_mask[k] = 0;
      }
      cur = std::move(next);
    }
    parent.observed = std::move(cur);

    for (const Pt& p : parent.observed.points)
      parent.client_of_point.push_back(ds.partition.client_of(p));

    {
      geo::CorruptionSpec cs{geo::CorruptionKind::drop, config.drop_rate, 0.0,
                             hash_mix(config.data_seed, 4, pi)};
      auto [gap_traj, gt] = geo::corrupt(parent.observed, cs);
      (void)gap_traj;
      parent.dropped_mask.assign(parent.observed.points.size(), 0);
      for (const auto& [idx, point] : gt.dropped) parent.dropped_mask[idx] = 1;
      std::size_t i = 0;
      const auto& mask = parent.dropped_mask;
      while (i < mask.size()) {
        if (!mask[i]) {
          ++i;
          continue;
        }
        std::size_t j = i;
        while (j < mask.size() && mask[j]) ++j;
        for (std::size_t k = i; k < j; ++k) {
          parent.missing_ts.push_back(parent.observed.points[k].t);
          parent.missing_labels.push_back(ds.vocab.cell_token(parent.observed.points[k]));
          parent.missing_is_tr.push_back(j - i > 1 ? 1 : 0);
        }
        i = j;
      }
    }

    const auto& obs = parent.observed;
    if (task_wanted(config, TaskKind::NF)) {
      const auto res = tasks::oracle_noise_filter(obs, config.nf_speed_thresh);
      std::vector<int> lab;
      for (auto keep : res.keep) lab.push_back(ds.vocab.binary_base() + (keep ? 0 : 1));
      parent.labels[TaskKind::NF] = std::move(lab);
    }
    tasks::StayPointResult stays;
    if (task_wanted(config, TaskKind::SPD) || task_wanted(config, TaskKind::TSeg))
      stays = tasks::oracle_stay_points(obs, config.spd_dist_thresh_m, config.spd_time_thresh_s);
    if (task_wanted(config, TaskKind::SPD)) {
      std::vector<int> lab;
      for (auto member : stays.member_mask)
        lab.push_back(ds.vocab.binary_base() + (member ? 1 : 0));
      parent.labels[TaskKind::SPD] = std::move(lab);
    }
    if (task_wanted(config, TaskKind::TSeg)) {
      const auto starts = tasks::oracle_segment(obs, stays);
      std::vector<int> lab;
      for (auto s : starts) lab.push_back(ds.vocab.binary_base() + (s ? 1 : 0));
      parent.labels[TaskKind::TSeg] = std::move(lab);
    }
    if (task_wanted(config, TaskKind::TSim)) {
      const auto res = tasks::oracle_simplify(obs, config.tsim_epsilon_m);
      std::vector<int> lab;
      for (auto kept : res.kept) lab.push_back(ds.vocab.binary_base() + (kept ? 1 : 0));
      parent.labels[TaskKind::TSim] = std::move(lab);
    }
    if (task_wanted(config, TaskKind::MM)) {
      const auto res = tasks::oracle_map_match(obs, ds.roads);
      std::vector<int> lab;
      for (auto id : res.segment_ids)
        lab.push_back(ds.vocab.seg_base() + static_cast<int>(id % ds.vocab.seg_slots));
      parent.labels[TaskKind::MM] = std::move(lab);
    }
    if (task_wanted(config, TaskKind::AD)) {
      // the injected detour flag is the label; oracle_anomaly on noisy data
      // would trip on noise alone at these magnitudes
      parent.labels[TaskKind::AD] = {ds.vocab.class_base() + (parent.gt.anomaly ? 1 : 0)};
    }
    if (task_wanted(config, TaskKind::TUL)) {
      parent.labels[TaskKind::TUL] = {ds.vocab.class_base() +
                                      tasks::label_tul(parent.meta) % ds.vocab.n_classes};
    }
    if (task_wanted(config, TaskKind::TMI)) {
      parent.labels[TaskKind::TMI] = {ds.vocab.class_base() + tasks::label_tmi(parent.meta)};
    }

    ds.parents.push_back(std::move(parent));
    if (ds.parents.back().is_test)
      ds.test_parents.push_back(static_cast<int>(pi));
    else
      ds.train_parents.push_back(static_cast<int>(pi));
  }
  if (ds.train_parents.empty()) fail(Err::ConfigError, "no training trajectories after the split");
  return ds;
}

// ---------------------------------------------------------------------------
// featurization
// ---------------------------------------------------------------------------

double squash(double x, double scale) { return x / (x + scale); }

// kinematic block shared by the client and evaluation paths; an unavailable
// neighbor contributes zeros
void fill_point_features(double* out, const tpa::Normalization& norm, const Pt* prev,
                         const Pt* self, const Pt* next, std::int64_t slot_t) {
  Pt anchor = self != nullptr ? *self : (prev != nullptr ? *prev : Pt{0, 0, slot_t});
  anchor.t = self != nullptr ? self->t : slot_t;
  const auto unit = norm.to_unit_raw(anchor);
  for (std::size_t i = 0; i < kPointFeatureLen; ++i) out[i] = 0.0;
  out[0] = unit[0];
  out[1] = unit[1];
  out[2] = unit[2];
  if (prev != nullptr) {
    const double d = geo::dist_m(*prev, anchor);
    const auto dt = std::max<std::int64_t>(1, anchor.t - prev->t);
    out[3] = squash(d, kDistScaleM);
    out[5] = squash(d / static_cast<double>(dt), kSpeedScaleMps);
  }
  if (next != nullptr) {
    const double d = geo::dist_m(anchor, *next);
    const auto dt = std::max<std::int64_t>(1, next->t - anchor.t);
    out[4] = squash(d, kDistScaleM);
    out[6] = squash(d / static_cast<double>(dt), kSpeedScaleMps);
  }
  if (prev != nullptr && next != nullptr) {
    const double span = static_cast<double>(next->t - prev->t);
    const double s = span > 0 ? static_cast<double>(anchor.t - prev->t) / span : 0.0;
    const Pt sync{prev->lon + s * (next->lon - prev->lon),
                  prev->lat + s * (next->lat - prev->lat), anchor.t};
    out[7] = squash(geo::dist_m(anchor, sync), kDevScaleM);
    constexpr double kPi = 3.14159265358979323846;
    const double h1 = std::atan2(anchor.lat - prev->lat, anchor.lon - prev->lon);
    const double h2 = std::atan2(next->lat - anchor.lat, next->lon - anchor.lon);
    double dh = std::abs(h2 - h1);
    if (dh > kPi) dh = 2 * kPi - dh;
    out[8] = dh / kPi;
  }
}

std::vector<double> make_prompt_features(const Dataset& ds, TaskKind task,
                                         const std::vector<Pt>* raw_points,
                                         const std::vector<tpa::Embedding>* embeddings,
                                         const ParentData& parent) {
  tke::PromptInfo info;
  if (task == TaskKind::NF || task == TaskKind::TMI) info.weather = parent.weather;
  if (task == TaskKind::MM || task == TaskKind::TMI) info.roads = &ds.roads;
  const auto prompt =
      tke::build_prompt(task, raw_points, embeddings, info, tke::format_for(task));
  return tke::featurize_prompt(prompt, ds.norm);
}

// SLM feature rows for slots of one (client, parent, task)
ad::Tensor client_features(const Dataset& ds, int client, const ParentData& parent, TaskKind task,
                           std::span<const Slot> slots) {
  const std::size_t width = tke::kPromptFeatureLen + kPointFeatureLen;
  ad::Tensor out = ad::Tensor::zeros({slots.size(), width});
  std::vector<Pt> own_points;
  for (std::size_t i = 0; i < parent.observed.points.size(); ++i)
    if (parent.client_of_point[i] == client) own_points.push_back(parent.observed.points[i]);
  const auto prompt = make_prompt_features(ds, task, &own_points, nullptr, parent);

  const auto& pts = parent.observed.points;
  auto owned = [&](int idx) {
    return idx >= 0 && idx < static_cast<int>(pts.size()) &&
           parent.client_of_point[static_cast<std::size_t>(idx)] == client;
  };

  for (std::size_t s = 0; s < slots.size(); ++s) {
    double* row = out.data.data() + s * width;
    std::copy(prompt.begin(), prompt.end(), row);
    const Slot& slot = slots[s];
    const Pt* prev = nullptr;
    const Pt* self = nullptr;
    const Pt* next = nullptr;
    if (slot.point_index >= 0) {
      self = &pts[static_cast<std::size_t>(slot.point_index)];
      if (owned(slot.point_index - 1)) prev = &pts[static_cast<std::size_t>(slot.point_index - 1)];
      if (owned(slot.point_index + 1)) next = &pts[static_cast<std::size_t>(slot.point_index + 1)];
    } else {
      for (int i = static_cast<int>(pts.size()) - 1; i >= 0; --i) {
        if (pts[static_cast<std::size_t>(i)].t < slot.t && owned(i) &&
            !parent.dropped_mask[static_cast<std::size_t>(i)]) {
          prev = &pts[static_cast<std::size_t>(i)];
          break;
        }
      }
      for (std::size_t i = 0; i < pts.size(); ++i) {
        if (pts[i].t > slot.t && owned(static_cast<int>(i)) && !parent.dropped_mask[i]) {
          next = &pts[i];
          break;
        }
      }
    }
    fill_point_features(row + tke::kPromptFeatureLen, ds.norm, prev, self, next, slot.t);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// channels, messages, shared state
// ---------------------------------------------------------------------------

namespace {

// rendezvous that can be torn down when an actor fails, so surviving
// threads throw instead of waiting forever
class AbortableBarrier {
 public:
  AbortableBarrier(int parties, std::function<void()> completion)
      : parties_(parties), completion_(std::move(completion)) {}

  void arrive_and_wait() {
    std::unique_lock<std::mutex> lock(mu_);
    if (aborted_) fail(Err::ChannelClosed, "barrier aborted");
    const std::uint64_t gen = generation_;
    if (++waiting_ == parties_) {
      completion_();
      waiting_ = 0;
      ++generation_;
      cv_.notify_all();
    } else {
      cv_.wait(lock, [&] { return generation_ != gen || aborted_; });
      if (aborted_) fail(Err::ChannelClosed, "barrier aborted");
    }
  }

  void abort() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      aborted_ = true;
    }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  int parties_;
  int waiting_ = 0;
  std::uint64_t generation_ = 0;
  bool aborted_ = false;
  std::function<void()> completion_;
};

template <typename T>
class Channel {
 public:
  void push(T value) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      if (closed_) fail(Err::ChannelClosed, "push on a closed channel");
      items_.push_back(std::move(value));
    }
    cv_.notify_all();
  }

  T pop() {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) fail(Err::ChannelClosed, "pop on a closed channel");
    T out = std::move(items_.front());
    items_.pop_front();
    return out;
  }

  void close() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> items_;
  bool closed_ = false;
};

struct SlotKey {
  int parent = 0;
  std::int64_t t = 0;
  bool has_self = false;
};

struct UpMsg {
  int round = 0;
  int client = 0;
  std::vector<tpa::Embedding> context;
  std::vector<std::vector<SlotKey>> slot_keys;  // per train task
  std::vector<ad::Tensor> slm_dists;            // per train task
  std::size_t embedding_bytes = 0;
  std::size_t result_bytes = 0;
};

struct DownMsg {
  int round = 0;
  std::vector<tpa::Embedding> echo;
  std::vector<ad::Tensor> llm_dists;
  std::size_t result_bytes = 0;
};

struct LoraMsg {
  int round = 0;
  int client = 0;
  std::vector<std::pair<int, std::vector<double>>> layers;  // adapter slot -> flat lora
  double n_samples = 0.0;
  std::size_t bytes = 0;
};

struct AdapterMsg {
  int round = 0;
  lm::AdapterBundle bundle;
  std::size_t bytes = 0;
};

std::size_t adapter_bundle_bytes(const lm::AdapterBundle& bundle) {
  std::size_t f64s = 0;
  for (const auto& layer : bundle.layers)
    f64s += layer.w.size() + layer.b.size() + layer.lora_down.size() + layer.lora_up.size();
  return 12 + bundle.layers.size() * 4 + f64s * 8;
}

struct ClientTaskSlots {
  std::vector<Slot> local;
  std::vector<Slot> cross;
};

struct ClientPlanData {
  std::map<TaskKind, std::map<int, ClientTaskSlots>> slots;  // [task][parent]
  std::vector<std::pair<int, int>> context;                  // (parent, point_index)
};

ClientPlanData build_client_slots(const cfg::RunConfig& config, const Dataset& ds, int client) {
  ClientPlanData plan;
  std::set<std::pair<int, int>> context;
  for (int pi : ds.train_parents) {
    const auto& parent = ds.parents[static_cast<std::size_t>(pi)];
    const auto& owners = parent.client_of_point;
    const int n = static_cast<int>(owners.size());

    for (TaskKind task : config.train_tasks) {
      auto& bucket = plan.slots[task][pi];
      const int window = task_context_window(task);

      if (task == TaskKind::AD || task == TaskKind::TUL || task == TaskKind::TMI) {
        int i = 0;
        while (i < n) {
          if (owners[static_cast<std::size_t>(i)] != client) {
            ++i;
            continue;
          }
          int j = i;
          while (j < n && owners[static_cast<std::size_t>(j)] == client) ++j;
          Slot slot;
          slot.parent = pi;
          slot.t = parent.observed.points[static_cast<std::size_t>(i)].t;
          slot.pooled = true;
          slot.seg_begin = i;
          slot.seg_end = j;
          slot.label = parent.labels.at(task)[0];
          bucket.local.push_back(slot);
          i = j;
        }
        continue;
      }

      if (task == TaskKind::TI || task == TaskKind::TR) {
        for (std::size_t g = 0; g < parent.missing_ts.size(); ++g) {
          const bool is_tr = parent.missing_is_tr[g] != 0;
          if ((task == TaskKind::TR) != is_tr) continue;
          const std::int64_t t = parent.missing_ts[g];
          int prev_idx = -1, next_idx = -1;
          for (int i = n - 1; i >= 0; --i) {
            if (parent.observed.points[static_cast<std::size_t>(i)].t < t &&
                !parent.dropped_mask[static_cast<std::size_t>(i)]) {
              prev_idx = i;
              break;
            }
          }
          for (int i = 0; i < n; ++i) {
            if (parent.observed.points[static_cast<std::size_t>(i)].t > t &&
                !parent.dropped_mask[static_cast<std::size_t>(i)]) {
              next_idx = i;
              break;
            }
          }
          // the gap belongs to the client holding the previous observed point
          if (prev_idx < 0 || owners[static_cast<std::size_t>(prev_idx)] != client) continue;
          Slot slot;
          slot.parent = pi;
          slot.t = t;
          slot.point_index = -1;
          const bool cross = next_idx >= 0 && owners[static_cast<std::size_t>(next_idx)] != client;
          if (cross) {
            context.insert({pi, prev_idx});
            bucket.cross.push_back(slot);
          } else {
            slot.label = parent.missing_labels[g];
            bucket.local.push_back(slot);
          }
        }
        continue;
      }

      const auto& labels = parent.labels.at(task);
      for (int i = 0; i < n; ++i) {
        if (owners[static_cast<std::size_t>(i)] != client) continue;
        Slot slot;
        slot.parent = pi;
        slot.t = parent.observed.points[static_cast<std::size_t>(i)].t;
        slot.point_index = i;
        if (route_task(owners, i, window) == Route::cross_client) {
          for (int d = -window; d <= window; ++d) {
            const int nb = i + d;
            if (nb >= 0 && nb < n && owners[static_cast<std::size_t>(nb)] == client)
              context.insert({pi, nb});
          }
          bucket.cross.push_back(slot);
        } else {
          slot.label = labels[static_cast<std::size_t>(i)];
          bucket.local.push_back(slot);
        }
      }
    }
  }
  plan.context.assign(context.begin(), context.end());
  return plan;
}

std::vector<Slot> flat_cross_slots(const ClientPlanData& plan, TaskKind task) {
  std::vector<Slot> out;
  const auto task_it = plan.slots.find(task);
  if (task_it == plan.slots.end()) return out;
  for (const auto& [parent, bucket] : task_it->second)
    out.insert(out.end(), bucket.cross.begin(), bucket.cross.end());
  std::sort(out.begin(), out.end(), [](const Slot& a, const Slot& b) {
    return std::pair{a.parent, a.t} < std::pair{b.parent, b.t};
  });
  return out;
}

struct Shared {
  Channel<UpMsg> up;
  Channel<LoraMsg> lora;
  std::vector<std::unique_ptr<Channel<DownMsg>>> down;
  std::vector<std::unique_ptr<Channel<AdapterMsg>>> adapter;

  std::vector<std::vector<double>> tpa_staging;
  std::vector<double> tpa_result;
  std::uint32_t tpa_round = 0;

  std::mutex ledger_mu;
  CommLedger ledger;
  std::vector<RoundLog> logs;

  std::exception_ptr failure;
  std::mutex failure_mu;
  AbortableBarrier* tpa_barrier = nullptr;

  void record_failure() {
    std::lock_guard<std::mutex> lock(failure_mu);
    if (!failure) failure = std::current_exception();
    up.close();
    lora.close();
    for (auto& ch : down) ch->close();
    for (auto& ch : adapter) ch->close();
    if (tpa_barrier != nullptr) tpa_barrier->abort();
  }

  void add_comm(int round, const std::function<void(RoundComm&)>& fn) {
    std::lock_guard<std::mutex> lock(ledger_mu);
    fn(ledger.rounds[static_cast<std::size_t>(round)]);
  }
};

ad::Tensor one_hot_rows(std::span<const int> labels, int vocab) {
  ad::Tensor t = ad::Tensor::zeros({labels.size(), static_cast<std::size_t>(vocab)});
  for (std::size_t i = 0; i < labels.size(); ++i)
    t.data[i * static_cast<std::size_t>(vocab) + static_cast<std::size_t>(labels[i])] = 1.0;
  return t;
}

// CE = -mean_rows sum one_hot * log(probs); probs must already be a softmax
ad::Graph::Id cross_entropy(ad::Graph& g, ad::Graph::Id probs, const ad::Tensor& one_hot) {
  const auto labels = g.constant(one_hot);
  const auto picked = g.mul(labels, g.log(probs));
  return g.scale(g.sum(picked), -1.0 / static_cast<double>(one_hot.shape[0]));
}

std::vector<int> scope_layers(const cfg::RunConfig& config, const lm::Model& model) {
  std::vector<int> out;
  const int first =
      config.sparse_scope == cfg::SparseScope::adapter ? model.first_adapter_layer() : 0;
  for (int i = first; i < model.cfg.n_layers; ++i) out.push_back(i);
  return out;
}

// CR bookkeeping against the previous round's snapshot; round 0 is uniform
std::vector<double> update_layer_stats(std::vector<tke::LayerStats>& stats, const lm::Model& model,
                                       std::span<const int> scope) {
  std::vector<double> crs(scope.size(), 0.0);
  if (stats.empty()) {
    for (int id : scope) {
      tke::LayerStats st;
      st.layer_id = id;
      st.prev_params = lm::lora_flat(model.layers[static_cast<std::size_t>(id)]);
      stats.push_back(std::move(st));
    }
  } else {
    for (std::size_t i = 0; i < scope.size(); ++i) {
      const auto current = lm::lora_flat(model.layers[static_cast<std::size_t>(scope[i])]);
      crs[i] = tke::change_rate(current, stats[i].prev_params);
      stats[i].cr = crs[i];
      stats[i].prev_params = current;
    }
  }
  return crs;
}

struct EvalModelSource {
  // per-client SLMs from the run, or one model applied everywhere
  const std::vector<lm::Model>* per_client = nullptr;
  const lm::Model* single = nullptr;

  const lm::Model& for_client(int client) const {
    if (single != nullptr) return *single;
    return (*per_client)[static_cast<std::size_t>(client)];
  }
};

std::vector<TaskMetric> evaluate_tasks(const cfg::RunConfig& config, const Dataset& ds,
                                       const EvalModelSource& models,
                                       const std::vector<TaskKind>& which) {
  std::vector<TaskMetric> out;
  const int vocab = ds.vocab.size();
  for (TaskKind task : which) {
    TaskMetric metric;
    metric.task = task;
    metric.seen_in_training = task_trained(config, task);

    std::vector<int> preds, truths;
    double sed_model_total = 0.0, sed_oracle_total = 0.0;
    std::size_t sed_segments = 0;

    for (int pi : ds.test_parents) {
      const auto& parent = ds.parents[static_cast<std::size_t>(pi)];
      const auto& owners = parent.client_of_point;
      const int n = static_cast<int>(owners.size());

      // iterate maximal per-client segments
      int i = 0;
      while (i < n) {
        const int client = owners[static_cast<std::size_t>(i)];
        int j = i;
        while (j < n && owners[static_cast<std::size_t>(j)] == client) ++j;
        const lm::Model& model = models.for_client(client);

        if (task == TaskKind::AD || task == TaskKind::TUL || task == TaskKind::TMI) {
          Slot slot;
          slot.parent = pi;
          slot.pooled = true;
          slot.seg_begin = i;
          slot.seg_end = j;
          slot.t = parent.observed.points[static_cast<std::size_t>(i)].t;
          std::vector<Slot> rows;
          for (int k = i; k < j; ++k) {
            Slot s;
            s.parent = pi;
            s.point_index = k;
            s.t = parent.observed.points[static_cast<std::size_t>(k)].t;
            rows.push_back(s);
          }
          const auto feats = client_features(ds, client, parent, task, rows);
          const auto probs = lm::forward_pooled(model, feats);
          int base = ds.vocab.class_base(), span = ds.vocab.n_classes;
          if (task == TaskKind::AD) span = 2;
          if (task == TaskKind::TMI) span = 4;
          int arg = 0;
          for (int v = 1; v < span; ++v)
            if (probs.data[static_cast<std::size_t>(base + v)] >
                probs.data[static_cast<std::size_t>(base + arg)])
              arg = v;
          preds.push_back(arg);
          truths.push_back(parent.labels.at(task)[0] - base);
          i = j;
          continue;
        }

        if (task == TaskKind::TI || task == TaskKind::TR) {
          std::vector<Slot> rows;
          std::vector<int> labels;
          for (std::size_t g = 0; g < parent.missing_ts.size(); ++g) {
            const bool is_tr = parent.missing_is_tr[g] != 0;
            if ((task == TaskKind::TR) != is_tr) continue;
            const std::int64_t t = parent.missing_ts[g];
            int prev_idx = -1;
            for (int k = n - 1; k >= 0; --k) {
              if (parent.observed.points[static_cast<std::size_t>(k)].t < t &&
                  !parent.dropped_mask[static_cast<std::size_t>(k)]) {
                prev_idx = k;
                break;
              }
            }
            if (prev_idx < i || prev_idx >= j) continue;
            Slot s;
            s.parent = pi;
            s.t = t;
            s.point_index = -1;
            rows.push_back(s);
            labels.push_back(parent.missing_labels[g] - ds.vocab.cell_base());
          }
          if (!rows.empty()) {
            const auto feats = client_features(ds, client, parent, task, rows);
            const auto probs = lm::forward(model, feats);
            for (std::size_t r = 0; r < rows.size(); ++r) {
              const double* row = probs.data.data() + r * static_cast<std::size_t>(vocab);
              int arg = 0;
              const int cells = ds.vocab.grid_rows * ds.vocab.grid_cols;
              for (int v = 1; v < cells; ++v)
                if (row[v] > row[arg]) arg = v;
              preds.push_back(arg);
              truths.push_back(labels[r]);
            }
          }
          i = j;
          continue;
        }

        // per-point tasks over the segment
        std::vector<Slot> rows;
        for (int k = i; k < j; ++k) {
          Slot s;
          s.parent = pi;
          s.point_index = k;
          s.t = parent.observed.points[static_cast<std::size_t>(k)].t;
          rows.push_back(s);
        }
        const auto feats = client_features(ds, client, parent, task, rows);
        const auto probs = lm::forward(model, feats);
        const auto& labels = parent.labels.at(task);

        if (task == TaskKind::MM) {
          for (int k = i; k < j; ++k) {
            const double* row =
                probs.data.data() + static_cast<std::size_t>(k - i) * static_cast<std::size_t>(vocab);
            int arg = 0;
            for (int v = 1; v < ds.vocab.seg_slots; ++v)
              if (row[ds.vocab.seg_base() + v] > row[ds.vocab.seg_base() + arg]) arg = v;
            preds.push_back(arg);
            truths.push_back(labels[static_cast<std::size_t>(k)] - ds.vocab.seg_base());
          }
          i = j;
          continue;
        }

        // binary tasks: NF, SPD, TSim, TSeg
        std::vector<double> positive_scores;
        for (int k = i; k < j; ++k) {
          const double* row =
              probs.data.data() + static_cast<std::size_t>(k - i) * static_cast<std::size_t>(vocab);
          const double p0 = row[ds.vocab.binary_base()];
          const double p1 = row[ds.vocab.binary_base() + 1];
          positive_scores.push_back(p1 / (p0 + p1 + 1e-300));
          preds.push_back(p1 > p0 ? 1 : 0);
          truths.push_back(labels[static_cast<std::size_t>(k)] - ds.vocab.binary_base());
        }

        if (task == TaskKind::TSim && j - i >= 4) {
          geo::Trajectory segment;
          segment.traj_id = parent.observed.traj_id;
          for (int k = i; k < j; ++k)
            segment.points.push_back(parent.observed.points[static_cast<std::size_t>(k)]);
          const auto oracle = tasks::oracle_simplify(segment, config.tsim_epsilon_m);
          std::size_t keep_count = 0;
          for (auto kept : oracle.kept) keep_count += kept;
          // matched compression: model keeps its top-k scores, endpoints forced
          std::vector<std::size_t> order(segment.points.size());
          for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
          std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return positive_scores[a] > positive_scores[b];
          });
          std::vector<std::uint8_t> model_keep(segment.points.size(), 0);
          model_keep.front() = 1;
          model_keep.back() = 1;
          std::size_t placed = 2;
          for (std::size_t k = 0; k < order.size() && placed < keep_count; ++k) {
            if (model_keep[order[k]]) continue;
            model_keep[order[k]] = 1;
            ++placed;
          }
          geo::Trajectory model_simplified;
          model_simplified.traj_id = segment.traj_id;
          for (std::size_t k = 0; k < segment.points.size(); ++k)
            if (model_keep[k]) model_simplified.points.push_back(segment.points[k]);
          sed_model_total += tasks::sed(model_simplified, segment);
          sed_oracle_total += tasks::sed(oracle.simplified, segment);
          ++sed_segments;
        }
        i = j;
      }
    }

    metric.support = preds.size();
    if (task == TaskKind::TSim) {
      if (sed_segments > 0) {
        metric.sed_m = sed_model_total / static_cast<double>(sed_segments);
        metric.oracle_sed_m = sed_oracle_total / static_cast<double>(sed_segments);
      }
    } else if (!preds.empty()) {
      switch (task) {
        case TaskKind::NF:
        case TaskKind::SPD:
        case TaskKind::TSeg:
        case TaskKind::AD:
          metric.f1 = tasks::f1_binary(preds, truths);
          {
            std::vector<int> all_pos(preds.size(), 1);
            metric.all_positive_f1 = tasks::f1_binary(all_pos, truths);
          }
          break;
        case TaskKind::TUL:
          metric.f1 = tasks::f1_macro(preds, truths, ds.vocab.n_classes);
          break;
        case TaskKind::TMI:
          metric.f1 = tasks::f1_macro(preds, truths, 4);
          break;
        default: {
          // micro F1 (exact match) for MM / TI / TR
          std::size_t hit = 0;
          for (std::size_t k = 0; k < preds.size(); ++k) hit += preds[k] == truths[k];
          metric.f1 = static_cast<double>(hit) / static_cast<double>(preds.size());
          break;
        }
      }
    }
    out.push_back(std::move(metric));
  }
  return out;
}

std::string iso_timestamp() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// the training run
// ---------------------------------------------------------------------------

RunResult run_training(const cfg::RunConfig& config) {
  const Dataset ds = prepare_dataset(config);
  const int c = config.clients;
  const int vocab = ds.vocab.size();
  const int n_tasks = static_cast<int>(config.train_tasks.size());
  const FreezeSchedule freeze{config.freeze_period};

  lm::ModelConfig llm_cfg;
  llm_cfg.n_layers = config.llm_layers;
  llm_cfg.width = config.width;
  llm_cfg.vocab_size = vocab;
  llm_cfg.lora_rank = config.lora_rank;
  llm_cfg.adapter_depth = config.adapter_depth;
  llm_cfg.in_dim = static_cast<int>(tke::kPromptFeatureLen + 3 * tpa::kEmbedDim);
  lm::Model llm = lm::build_llm(llm_cfg, hash_mix(config.seed, 0x6c6c /*"ll"*/));

  lm::ModelConfig slm_cfg = llm_cfg;
  slm_cfg.n_layers = config.slm_layers;
  slm_cfg.in_dim = static_cast<int>(tke::kPromptFeatureLen + kPointFeatureLen);

  // server-side oracle label lookup; the simulator computes these on full
  // trajectories and hands them to the server loss only
  std::map<std::tuple<int, int, std::int64_t>, int> server_labels;
  for (int pi : ds.train_parents) {
    const auto& parent = ds.parents[static_cast<std::size_t>(pi)];
    for (int ti = 0; ti < n_tasks; ++ti) {
      const TaskKind task = config.train_tasks[static_cast<std::size_t>(ti)];
      if (task == TaskKind::TI || task == TaskKind::TR) {
        for (std::size_t g = 0; g < parent.missing_ts.size(); ++g) {
          const bool is_tr = parent.missing_is_tr[g] != 0;
          if ((task == TaskKind::TR) != is_tr) continue;
          server_labels[{ti, pi, parent.missing_ts[g]}] = parent.missing_labels[g];
        }
        continue;
      }
      const auto it = parent.labels.find(task);
      if (it == parent.labels.end() || it->second.size() != parent.observed.points.size()) continue;
      for (std::size_t i = 0; i < parent.observed.points.size(); ++i)
        server_labels[{ti, pi, parent.observed.points[i].t}] = it->second[i];
    }
  }

  Shared shared;
  shared.ledger.rounds.resize(static_cast<std::size_t>(config.rounds));
  shared.logs.resize(static_cast<std::size_t>(config.rounds));
  for (auto& log : shared.logs) log.clients.resize(static_cast<std::size_t>(c));
  for (int i = 0; i < c; ++i) {
    shared.down.push_back(std::make_unique<Channel<DownMsg>>());
    shared.adapter.push_back(std::make_unique<Channel<AdapterMsg>>());
  }
  shared.tpa_staging.resize(static_cast<std::size_t>(c));

  // clients share the initial TPA weights (a pre-agreed starting model);
  // secure aggregation keeps them in sync afterwards
  const tpa::TpaParams tpa_init = tpa::init_params(ds.norm, hash_mix(config.seed, 0x747061));

  struct ClientRuntime {
    int id = 0;
    tpa::TpaParams tpa_params;
    lm::Model slm;
    std::unique_ptr<ad::Adam> tpa_opt, slm_opt;
    ClientPlanData plan;
    std::vector<tke::LayerStats> stats;
    std::vector<ad::Tensor> stored_llm_dists;
    std::vector<std::vector<Slot>> cross_slots;  // per task, fixed order
  };

  std::vector<ClientRuntime> clients(static_cast<std::size_t>(c));
  for (int i = 0; i < c; ++i) {
    auto& cl = clients[static_cast<std::size_t>(i)];
    cl.id = i;
    cl.tpa_params = tpa_init;
    cl.slm = lm::build_slm(llm, slm_cfg, hash_mix(config.seed, 0x736c6d, static_cast<std::uint64_t>(i)));
    cl.tpa_opt = std::make_unique<ad::Adam>(config.lr_tpa);
    cl.slm_opt = std::make_unique<ad::Adam>(config.lr_slm);
    cl.plan = build_client_slots(config, ds, i);
    for (TaskKind task : config.train_tasks) cl.cross_slots.push_back(flat_cross_slots(cl.plan, task));
  }

  // TPA aggregation rendezvous: the barrier completion runs the masking
  // protocol once on the staged parameter vectors. The barrier is crossed
  // twice per fresh round (aggregate, then release), so the completion
  // alternates between the protocol run and a no-op.
  int tpa_phase = 0;
  AbortableBarrier tpa_barrier(c, [&]() {
    if (tpa_phase++ % 2 != 0) return;
    secagg::TraceLog trace;
    shared.tpa_result = secagg::run_aggregation_round(
        shared.tpa_staging, config.session_seed, shared.tpa_round, &trace,
        hash_mix(config.session_seed, shared.tpa_round, 0x696c /*"il"*/));
    shared.add_comm(static_cast<int>(shared.tpa_round),
                    [&](RoundComm& rc) { rc.tpa_agg += trace.total_bytes(); });
  });
  shared.tpa_barrier = &tpa_barrier;

  auto client_body = [&](ClientRuntime& cl) {
    Rng batch_rng(hash_mix(config.seed, 0x626174 /*"bat"*/, static_cast<std::uint64_t>(cl.id)));
    for (int r = 0; r < config.rounds; ++r) {
      const bool fresh = !freeze.is_frozen(r);

      // sparse-tuning bookkeeping over the configured scope
      const auto scope = scope_layers(config, cl.slm);
      const auto crs = update_layer_stats(cl.stats, cl.slm, scope);
      const auto layer_ratios = tke::ratios(crs);
      const int n_m = static_cast<int>(std::floor(config.m_ratio * static_cast<double>(scope.size())));
      const auto plan = tke::select_layers(layer_ratios, n_m,
                                           hash_mix(config.session_seed,
                                                    static_cast<std::uint64_t>(cl.id) + 1),
                                           r);
      std::vector<int> selected_global;
      for (int local_idx : plan.selected)
        selected_global.push_back(scope[static_cast<std::size_t>(local_idx)]);
      std::sort(selected_global.begin(), selected_global.end());

      if (fresh) {
        UpMsg msg;
        msg.round = r;
        msg.client = cl.id;
        for (const auto& [pi, idx] : cl.plan.context) {
          const auto& parent = ds.parents[static_cast<std::size_t>(pi)];
          const Pt& p = parent.observed.points[static_cast<std::size_t>(idx)];
          msg.context.push_back(
              tpa::encode(p, tpa::PointKey{parent.observed.traj_id, p.t}, cl.tpa_params));
        }
        msg.embedding_bytes = 12 + msg.context.size() * (16 + tpa::kEmbedDim * 8);
        for (int ti = 0; ti < n_tasks; ++ti) {
          const auto& slots = cl.cross_slots[static_cast<std::size_t>(ti)];
          std::vector<SlotKey> keys;
          ad::Tensor dists = ad::Tensor::zeros({slots.size(), static_cast<std::size_t>(vocab)});
          if (!slots.empty()) {
            // group rows by parent for featurization
            std::size_t row = 0;
            std::size_t begin = 0;
            while (begin < slots.size()) {
              std::size_t end = begin;
              while (end < slots.size() && slots[end].parent == slots[begin].parent) ++end;
              const auto& parent = ds.parents[static_cast<std::size_t>(slots[begin].parent)];
              const auto feats = client_features(
                  ds, cl.id, parent, config.train_tasks[static_cast<std::size_t>(ti)],
                  std::span<const Slot>(slots.data() + begin, end - begin));
              const auto probs = lm::forward(cl.slm, feats);
              std::copy(probs.data.begin(), probs.data.end(),
                        dists.data.begin() + static_cast<std::ptrdiff_t>(row * static_cast<std::size_t>(vocab)));
              row += end - begin;
              begin = end;
            }
          }
          for (const auto& slot : slots) {
            keys.push_back(SlotKey{slot.parent, slot.t, slot.point_index >= 0});
          }
          msg.result_bytes += 12 + slots.size() * (16 + static_cast<std::size_t>(vocab) * 8);
          msg.slot_keys.push_back(std::move(keys));
          msg.slm_dists.push_back(std::move(dists));
        }
        shared.add_comm(r, [&](RoundComm& rc) {
          rc.embedding_up += msg.embedding_bytes;
          rc.result_up += msg.result_bytes;
        });
        shared.up.push(std::move(msg));

        DownMsg dm = shared.down[static_cast<std::size_t>(cl.id)]->pop();
        // decode the echoed results; count matches the upload by contract
        if (dm.echo.size() != cl.plan.context.size())
          fail(Err::MissingBatch, "result echo does not cover the upload");
        for (const auto& emb : dm.echo) {
          (void)tpa::decode({emb.e.data(), emb.e.size()}, cl.tpa_params);
        }
        cl.stored_llm_dists = std::move(dm.llm_dists);
      }

      // ---- local objectives, local_steps optimizer passes ----------------
      lm::Trainability train = lm::Trainability::none(cl.slm.cfg.n_layers);
      if (config.sparse_scope == cfg::SparseScope::adapter) {
        for (int i = 0; i < cl.slm.first_adapter_layer(); ++i)
          train.dense[static_cast<std::size_t>(i)] = 1;
      }
      for (int id : selected_global) train.lora[static_cast<std::size_t>(id)] = 1;

      double n_samples = 0.0;
      double l2_total = 0.0, l3_total = 0.0;
      for (int local_step = 0; local_step < config.local_steps; ++local_step) {
      ad::Graph g;
      const auto leaves = lm::make_leaves(g, cl.slm, train);

      std::vector<ad::Graph::Id> task_l3;
      std::vector<double> l3_values;
      for (int ti = 0; ti < n_tasks; ++ti) {
        const TaskKind task = config.train_tasks[static_cast<std::size_t>(ti)];
        // gather local slots across parents
        std::vector<std::pair<int, Slot>> all_local;
        const auto it = cl.plan.slots.find(task);
        if (it != cl.plan.slots.end()) {
          for (const auto& [pi, bucket] : it->second)
            for (const auto& slot : bucket.local) all_local.push_back({pi, slot});
        }
        if (all_local.empty()) continue;

        const bool pooled = all_local.front().second.pooled;
        const std::size_t budget = pooled
                                       ? std::max<std::size_t>(2, static_cast<std::size_t>(config.batch_points) / 16)
                                       : static_cast<std::size_t>(config.batch_points);
        std::vector<std::pair<int, Slot>> batch;
        if (all_local.size() <= budget) {
          batch = all_local;
        } else {
          for (std::size_t k = 0; k < budget; ++k) {
            const std::size_t j = static_cast<std::size_t>(
                batch_rng.uniform_int(0, static_cast<std::int64_t>(all_local.size()) - 1));
            batch.push_back(all_local[j]);
          }
        }
        n_samples += static_cast<double>(batch.size());

        if (!pooled) {
          // group by parent, build rows + labels
          std::sort(batch.begin(), batch.end(), [](const auto& a, const auto& b) {
            return std::pair{a.first, a.second.t} < std::pair{b.first, b.second.t};
          });
          std::vector<int> labels;
          std::vector<ad::Graph::Id> prob_parts;
          std::size_t begin = 0;
          while (begin < batch.size()) {
            std::size_t end = begin;
            while (end < batch.size() && batch[end].first == batch[begin].first) ++end;
            std::vector<Slot> rows;
            for (std::size_t k = begin; k < end; ++k) rows.push_back(batch[k].second);
            const auto& parent = ds.parents[static_cast<std::size_t>(batch[begin].first)];
            const auto feats = client_features(ds, cl.id, parent, task, rows);
            const auto x = g.constant(feats);
            prob_parts.push_back(lm::probs_graph(g, cl.slm, leaves, x));
            for (const auto& slot : rows) labels.push_back(slot.label);
            begin = end;
          }
          // CE per parent-part, weighted by rows
          ad::Graph::Id ce = -1;
          std::size_t done = 0;
          for (std::size_t part = 0, lab_pos = 0; part < prob_parts.size(); ++part) {
            const std::size_t rows = g.value(prob_parts[part]).shape[0];
            const std::vector<int> part_labels(labels.begin() + static_cast<std::ptrdiff_t>(lab_pos),
                                               labels.begin() + static_cast<std::ptrdiff_t>(lab_pos + rows));
            auto part_ce = cross_entropy(g, prob_parts[part], one_hot_rows(part_labels, vocab));
            part_ce = g.scale(part_ce, static_cast<double>(rows) / static_cast<double>(labels.size()));
            ce = ce < 0 ? part_ce : g.add(ce, part_ce);
            lab_pos += rows;
            done += rows;
          }
          (void)done;
          task_l3.push_back(ce);
          l3_values.push_back(g.value(ce).data[0]);
        } else {
          // pooled classification: one pooled distribution per slot
          std::vector<int> labels;
          ad::Graph::Id ce = -1;
          for (const auto& [pi, slot] : batch) {
            const auto& parent = ds.parents[static_cast<std::size_t>(pi)];
            std::vector<Slot> rows;
            for (int k = slot.seg_begin; k < slot.seg_end; ++k) {
              Slot s;
              s.parent = pi;
              s.point_index = k;
              s.t = parent.observed.points[static_cast<std::size_t>(k)].t;
              rows.push_back(s);
            }
            const auto feats = client_features(ds, cl.id, parent, task, rows);
            const auto x = g.constant(feats);
            const auto pooled_probs = lm::pooled_probs_graph(g, cl.slm, leaves, x);
            auto slot_ce = cross_entropy(g, pooled_probs, one_hot_rows({&slot.label, 1}, vocab));
            slot_ce = g.scale(slot_ce, 1.0 / static_cast<double>(batch.size()));
            ce = ce < 0 ? slot_ce : g.add(ce, slot_ce);
            labels.push_back(slot.label);
          }
          task_l3.push_back(ce);
          l3_values.push_back(g.value(ce).data[0]);
        }
      }

      // distillation on the cross slots against the stored server outputs
      std::vector<ad::Graph::Id> task_l2;
      std::vector<double> l2_values;
      if (!cl.stored_llm_dists.empty()) {
        for (int ti = 0; ti < n_tasks; ++ti) {
          const auto& slots = cl.cross_slots[static_cast<std::size_t>(ti)];
          const auto& stored = cl.stored_llm_dists[static_cast<std::size_t>(ti)];
          if (slots.empty() || stored.size() == 0) continue;
          std::vector<ad::Graph::Id> parts;
          std::size_t begin = 0;
          while (begin < slots.size()) {
            std::size_t end = begin;
            while (end < slots.size() && slots[end].parent == slots[begin].parent) ++end;
            const auto& parent = ds.parents[static_cast<std::size_t>(slots[begin].parent)];
            const auto feats = client_features(
                ds, cl.id, parent, config.train_tasks[static_cast<std::size_t>(ti)],
                std::span<const Slot>(slots.data() + begin, end - begin));
            parts.push_back(lm::probs_graph(g, cl.slm, leaves, g.constant(feats)));
            begin = end;
          }
          // stack stored rows to match the flattened slot order
          ad::Graph::Id kl = -1;
          std::size_t row = 0;
          for (const auto part : parts) {
            const std::size_t rows = g.value(part).shape[0];
            ad::Tensor stored_part =
                ad::Tensor::zeros({rows, static_cast<std::size_t>(vocab)});
            std::copy(stored.data.begin() + static_cast<std::ptrdiff_t>(row * static_cast<std::size_t>(vocab)),
                      stored.data.begin() + static_cast<std::ptrdiff_t>((row + rows) * static_cast<std::size_t>(vocab)),
                      stored_part.data.begin());
            auto part_kl = tke::reverse_kl_loss(g, part, g.constant(stored_part));
            part_kl = g.scale(part_kl, static_cast<double>(rows) / static_cast<double>(slots.size()));
            kl = kl < 0 ? part_kl : g.add(kl, part_kl);
            row += rows;
          }
          task_l2.push_back(kl);
          l2_values.push_back(g.value(kl).data[0]);
        }
      }

      ad::Graph::Id slm_loss = -1;
      if (!task_l3.empty()) {
        ad::Graph::Id l3 = task_l3[0];
        for (std::size_t k = 1; k < task_l3.size(); ++k) l3 = g.add(l3, task_l3[k]);
        l3_total = multi_task_loss(l3_values);
        slm_loss = g.scale(l3, config.client_w3);
      }
      if (!task_l2.empty()) {
        ad::Graph::Id l2 = task_l2[0];
        for (std::size_t k = 1; k < task_l2.size(); ++k) l2 = g.add(l2, task_l2[k]);
        l2_total = multi_task_loss(l2_values);
        const auto weighted = g.scale(l2, config.client_w2);
        slm_loss = slm_loss < 0 ? weighted : g.add(slm_loss, weighted);
      }

      if (slm_loss >= 0) {
        g.backward(slm_loss);
        for (int i = 0; i < cl.slm.cfg.n_layers; ++i) {
          auto& layer = cl.slm.layers[static_cast<std::size_t>(i)];
          const std::string tag = "slm" + std::to_string(i);
          if (train.dense[static_cast<std::size_t>(i)]) {
            cl.slm_opt->step(tag + ".w", layer.w.data, g.grad(leaves.w[static_cast<std::size_t>(i)]).data);
            cl.slm_opt->step(tag + ".b", layer.b.data, g.grad(leaves.b[static_cast<std::size_t>(i)]).data);
          }
          if (train.lora[static_cast<std::size_t>(i)]) {
            cl.slm_opt->step(tag + ".down", layer.lora_down.data,
                             g.grad(leaves.down[static_cast<std::size_t>(i)]).data);
            cl.slm_opt->step(tag + ".up", layer.lora_up.data,
                             g.grad(leaves.up[static_cast<std::size_t>(i)]).data);
          }
        }
      }
      }  // local_steps

      // TPA objective: autoencoder reconstruction on a local point batch
      double l1_value = 0.0;
      {
        std::vector<Pt> pool;
        for (int pi : ds.train_parents) {
          const auto& parent = ds.parents[static_cast<std::size_t>(pi)];
          for (std::size_t k = 0; k < parent.observed.points.size(); ++k)
            if (parent.client_of_point[k] == cl.id) pool.push_back(parent.observed.points[k]);
        }
        if (!pool.empty()) {
          std::vector<Pt> batch;
          const std::size_t budget = static_cast<std::size_t>(config.batch_points);
          for (std::size_t k = 0; k < std::min(budget, pool.size()); ++k) {
            batch.push_back(pool[static_cast<std::size_t>(
                batch_rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))]);
          }
          ad::Graph tg;
          const auto tpa_leaves = tpa::make_leaves(tg, cl.tpa_params);
          const auto x = tg.constant(tpa::normalized_features(batch, ds.norm));
          const auto recon = tpa::recon_loss_graph(tg, tpa_leaves, x);
          l1_value = tg.value(recon).data[0];
          const auto weighted = tg.scale(recon, config.client_w1);
          tg.backward(weighted);
          for (std::size_t i = 0; i < cl.tpa_params.encoder.size(); ++i) {
            cl.tpa_opt->step("enc.w" + std::to_string(i), cl.tpa_params.encoder[i].w.data,
                             tg.grad(tpa_leaves.enc_w[i]).data);
            cl.tpa_opt->step("enc.b" + std::to_string(i), cl.tpa_params.encoder[i].b.data,
                             tg.grad(tpa_leaves.enc_b[i]).data);
          }
          for (std::size_t i = 0; i < cl.tpa_params.decoder.size(); ++i) {
            cl.tpa_opt->step("dec.w" + std::to_string(i), cl.tpa_params.decoder[i].w.data,
                             tg.grad(tpa_leaves.dec_w[i]).data);
            cl.tpa_opt->step("dec.b" + std::to_string(i), cl.tpa_params.decoder[i].b.data,
                             tg.grad(tpa_leaves.dec_b[i]).data);
          }
        }
      }

      {
        auto& log = shared.logs[static_cast<std::size_t>(r)].clients[static_cast<std::size_t>(cl.id)];
        log.l1 = l1_value;
        log.l2 = l2_total;
        log.l3 = l3_total;
        log.selected = selected_global;
        log.ratios = layer_ratios;
      }

      // upload the adapter-layer LoRA of the layers trained this round
      LoraMsg lmsg;
      lmsg.round = r;
      lmsg.client = cl.id;
      lmsg.n_samples = std::max(1.0, n_samples);
      for (int id : selected_global) {
        if (!cl.slm.is_adapter_layer(id)) continue;
        const int slot = id - cl.slm.first_adapter_layer();
        lmsg.layers.push_back({slot, lm::lora_flat(cl.slm.layers[static_cast<std::size_t>(id)])});
      }
      lmsg.bytes = 12 + 8;  // header + sample count
      for (const auto& [slot, values] : lmsg.layers) lmsg.bytes += 4 + values.size() * 8;
      shared.add_comm(r, [&](RoundComm& rc) { rc.lora_up += lmsg.bytes; });
      shared.lora.push(std::move(lmsg));

      // decentralized TPA aggregation at the end of each fresh round
      if (fresh && c >= 1) {
        shared.tpa_staging[static_cast<std::size_t>(cl.id)] = cl.tpa_params.flatten();
        if (cl.id == 0) shared.tpa_round = static_cast<std::uint32_t>(r);
        tpa_barrier.arrive_and_wait();
        cl.tpa_params.unflatten(shared.tpa_result);
        tpa_barrier.arrive_and_wait();  // all readers done before the next write
      }

      AdapterMsg am = shared.adapter[static_cast<std::size_t>(cl.id)]->pop();
      lm::install_adapter(cl.slm, am.bundle);
      shared.add_comm(r, [&](RoundComm& rc) { rc.adapter_down += am.bytes; });
    }
  };

  auto server_body = [&]() {
    struct Stored {
      std::vector<UpMsg> ups;                       // sorted by client
      tpa::EmbeddingUnion un;
      std::map<std::pair<std::string, std::int64_t>, std::size_t> key_to_union;
      std::map<std::string, int> parent_by_id;
      std::vector<std::vector<SlotKey>> slots;      // per task, concat client order
      std::vector<std::vector<std::size_t>> counts; // per task, rows per client
      std::vector<ad::Tensor> slm_dists;            // per task
    } stored;
    ad::Adam llm_opt(config.lr_llm);
    std::vector<tke::LayerStats> stats;

    for (std::size_t i = 0; i < ds.parents.size(); ++i)
      stored.parent_by_id[ds.parents[i].observed.traj_id] = static_cast<int>(i);

    for (int r = 0; r < config.rounds; ++r) {
      const bool fresh = !freeze.is_frozen(r);

      if (fresh) {
        std::vector<UpMsg> ups;
        for (int i = 0; i < c; ++i) ups.push_back(shared.up.pop());
        std::sort(ups.begin(), ups.end(),
                  [](const UpMsg& a, const UpMsg& b) { return a.client < b.client; });

        std::vector<tpa::EmbeddingBatch> batches;
        for (const auto& up : ups) batches.push_back({up.client, up.context});
        stored.un = tpa::union_embeddings(batches);
        stored.key_to_union.clear();
        for (std::size_t i = 0; i < stored.un.embeddings.size(); ++i) {
          const auto& key = stored.un.embeddings[i].key;
          stored.key_to_union[{key.parent_id, key.t}] = i;
        }
        stored.slots.assign(static_cast<std::size_t>(n_tasks), {});
        stored.counts.assign(static_cast<std::size_t>(n_tasks), {});
        stored.slm_dists.assign(static_cast<std::size_t>(n_tasks), ad::Tensor());
        for (int ti = 0; ti < n_tasks; ++ti) {
          std::vector<double> rows;
          std::size_t total_rows = 0;
          for (const auto& up : ups) {
            const auto& keys = up.slot_keys[static_cast<std::size_t>(ti)];
            stored.counts[static_cast<std::size_t>(ti)].push_back(keys.size());
            stored.slots[static_cast<std::size_t>(ti)].insert(
                stored.slots[static_cast<std::size_t>(ti)].end(), keys.begin(), keys.end());
            const auto& dists = up.slm_dists[static_cast<std::size_t>(ti)];
            rows.insert(rows.end(), dists.data.begin(), dists.data.end());
            total_rows += keys.size();
          }
          stored.slm_dists[static_cast<std::size_t>(ti)] =
              total_rows == 0 ? ad::Tensor()
                              : ad::Tensor::matrix(total_rows, static_cast<std::size_t>(vocab),
                                                   std::move(rows));
        }
        stored.ups = std::move(ups);
      }

      // ---- LLM objectives on the stored (possibly frozen) exchange ------
      const std::vector<int> scope = [&] {
        std::vector<int> out;
        for (int i = 0; i < llm.cfg.n_layers; ++i) out.push_back(i);
        return out;
      }();
      const auto crs = update_layer_stats(stats, llm, scope);
      const auto layer_ratios = tke::ratios(crs);
      const int n_m = static_cast<int>(std::floor(config.m_ratio * static_cast<double>(scope.size())));
      const auto plan =
          tke::select_layers(layer_ratios, n_m, hash_mix(config.session_seed, 0x736572 /*"ser"*/), r);
      std::vector<int> selected = plan.selected;
      std::sort(selected.begin(), selected.end());

      double l1_total = 0.0, l2_total = 0.0;
      std::vector<ad::Tensor> llm_outputs(static_cast<std::size_t>(n_tasks));

      // feature rows and labels per task are a pure function of the stored
      // exchange; build them once per round
      std::vector<ad::Tensor> task_feats(static_cast<std::size_t>(n_tasks));
      std::vector<std::vector<int>> task_labels(static_cast<std::size_t>(n_tasks));
      bool have_rows = false;
      if (!stored.slots.empty()) {
        std::map<int, std::vector<std::pair<std::int64_t, std::size_t>>> parent_keys;
        for (std::size_t i = 0; i < stored.un.embeddings.size(); ++i) {
          const auto& key = stored.un.embeddings[i].key;
          parent_keys[stored.parent_by_id[key.parent_id]].push_back({key.t, i});
        }
        for (int ti = 0; ti < n_tasks; ++ti) {
          const auto& slots = stored.slots[static_cast<std::size_t>(ti)];
          if (slots.empty()) continue;
          have_rows = true;
          const TaskKind task = config.train_tasks[static_cast<std::size_t>(ti)];
          const std::size_t width = tke::kPromptFeatureLen + 3 * tpa::kEmbedDim;
          ad::Tensor feats = ad::Tensor::zeros({slots.size(), width});
          std::map<int, std::vector<double>> parent_prompt;
          std::vector<int> labels(slots.size(), 0);
          for (std::size_t s = 0; s < slots.size(); ++s) {
            const SlotKey& sk = slots[s];
            const auto& parent = ds.parents[static_cast<std::size_t>(sk.parent)];
            auto prompt_it = parent_prompt.find(sk.parent);
            if (prompt_it == parent_prompt.end()) {
              std::vector<tpa::Embedding> parent_embs;
              for (const auto& [t, idx] : parent_keys[sk.parent])
                parent_embs.push_back(stored.un.embeddings[idx]);
              prompt_it =
                  parent_prompt
                      .emplace(sk.parent, make_prompt_features(ds, task, nullptr, &parent_embs, parent))
                      .first;
            }
            double* row = feats.data.data() + s * width;
            std::copy(prompt_it->second.begin(), prompt_it->second.end(), row);
            double* triple = row + tke::kPromptFeatureLen;
            const auto& keys = parent_keys[sk.parent];
            if (sk.has_self) {
              const auto it = stored.key_to_union.find({parent.observed.traj_id, sk.t});
              if (it != stored.key_to_union.end()) {
                const auto& e = stored.un.embeddings[it->second].e;
                std::copy(e.begin(), e.end(), triple + tpa::kEmbedDim);
              }
            }
            // prev: greatest uploaded t' < t; next: smallest t' > t
            auto lo = std::lower_bound(keys.begin(), keys.end(), sk.t,
                                       [](const auto& a, std::int64_t t) { return a.first < t; });
            if (lo != keys.begin()) {
              const auto& e = stored.un.embeddings[(lo - 1)->second].e;
              std::copy(e.begin(), e.end(), triple);
            }
            auto hi = std::upper_bound(keys.begin(), keys.end(), sk.t,
                                       [](std::int64_t t, const auto& a) { return t < a.first; });
            if (hi != keys.end()) {
              const auto& e = stored.un.embeddings[hi->second].e;
              std::copy(e.begin(), e.end(), triple + 2 * tpa::kEmbedDim);
            }
            const auto lab = server_labels.find({ti, sk.parent, sk.t});
            labels[s] = lab != server_labels.end() ? lab->second : ds.vocab.binary_base();
          }
          task_feats[static_cast<std::size_t>(ti)] = std::move(feats);
          task_labels[static_cast<std::size_t>(ti)] = std::move(labels);
        }
      }

      if (have_rows) {
        lm::Trainability train = lm::Trainability::none(llm.cfg.n_layers);
        for (int id : selected) train.lora[static_cast<std::size_t>(id)] = 1;
        for (int local_step = 0; local_step < config.local_steps; ++local_step) {
          ad::Graph g;
          const auto leaves = lm::make_leaves(g, llm, train);
          std::vector<ad::Graph::Id> l1_parts, l2_parts;
          std::vector<double> l1_vals, l2_vals;
          for (int ti = 0; ti < n_tasks; ++ti) {
            if (task_feats[static_cast<std::size_t>(ti)].size() == 0) continue;
            const auto probs =
                lm::probs_graph(g, llm, leaves, g.constant(task_feats[static_cast<std::size_t>(ti)]));
            llm_outputs[static_cast<std::size_t>(ti)] = g.value(probs);
            const auto& slm_part = stored.slm_dists[static_cast<std::size_t>(ti)];
            const auto fkl = tke::forward_kl_loss(g, probs, g.constant(slm_part));
            l1_parts.push_back(fkl);
            l1_vals.push_back(g.value(fkl).data[0]);
            const auto ce = cross_entropy(
                g, probs, one_hot_rows(task_labels[static_cast<std::size_t>(ti)], vocab));
            l2_parts.push_back(ce);
            l2_vals.push_back(g.value(ce).data[0]);
          }
          if (l1_parts.empty()) break;
          ad::Graph::Id l1 = l1_parts[0];
          for (std::size_t k = 1; k < l1_parts.size(); ++k) l1 = g.add(l1, l1_parts[k]);
          ad::Graph::Id l2 = l2_parts[0];
          for (std::size_t k = 1; k < l2_parts.size(); ++k) l2 = g.add(l2, l2_parts[k]);
          const auto total = g.add(g.scale(l1, config.server_w1), g.scale(l2, config.server_w2));
          l1_total = multi_task_loss(l1_vals);
          l2_total = multi_task_loss(l2_vals);
          g.backward(total);
          for (int id : selected) {
            auto& layer = llm.layers[static_cast<std::size_t>(id)];
            const std::string tag = "llm" + std::to_string(id);
            llm_opt.step(tag + ".down", layer.lora_down.data,
                         g.grad(leaves.down[static_cast<std::size_t>(id)]).data);
            llm_opt.step(tag + ".up", layer.lora_up.data,
                         g.grad(leaves.up[static_cast<std::size_t>(id)]).data);
          }
        }
      }

      if (fresh) {
        // split the echoed results and the per-task outputs back per client
        const auto split = tpa::split_results(stored.un.embeddings, stored.un);
        for (int i = 0; i < c; ++i) {
          DownMsg dm;
          dm.round = r;
          for (const auto& batch : split) {
            if (batch.client_id == i) dm.echo = batch.embeddings;
          }
          std::size_t offset_client = 0;
          for (int ti = 0; ti < n_tasks; ++ti) {
            const auto& counts = stored.counts[static_cast<std::size_t>(ti)];
            std::size_t begin = 0;
            for (int k = 0; k < i; ++k) begin += counts[static_cast<std::size_t>(k)];
            const std::size_t rows = counts[static_cast<std::size_t>(i)];
            ad::Tensor part = ad::Tensor::zeros({rows, static_cast<std::size_t>(vocab)});
            if (rows > 0 && llm_outputs[static_cast<std::size_t>(ti)].size() > 0) {
              const auto& full = llm_outputs[static_cast<std::size_t>(ti)];
              std::copy(full.data.begin() + static_cast<std::ptrdiff_t>(begin * static_cast<std::size_t>(vocab)),
                        full.data.begin() + static_cast<std::ptrdiff_t>((begin + rows) * static_cast<std::size_t>(vocab)),
                        part.data.begin());
            }
            dm.result_bytes += 12 + rows * static_cast<std::size_t>(vocab) * 8;
            dm.llm_dists.push_back(std::move(part));
            offset_client += rows;
          }
          (void)offset_client;
          dm.result_bytes += 12 + dm.echo.size() * (16 + tpa::kEmbedDim * 8);
          shared.add_comm(r, [&](RoundComm& rc) { rc.result_down += dm.result_bytes; });
          shared.down[static_cast<std::size_t>(i)]->push(std::move(dm));
        }
      }

      // merge the clients' adapter LoRA returns
      std::vector<LoraMsg> returns;
      for (int i = 0; i < c; ++i) returns.push_back(shared.lora.pop());
      std::sort(returns.begin(), returns.end(),
                [](const LoraMsg& a, const LoraMsg& b) { return a.client < b.client; });
      for (int slot = 0; slot < llm.cfg.adapter_depth; ++slot) {
        std::vector<tke::LoraUpdate> updates;
        for (const auto& ret : returns) {
          for (const auto& [s, values] : ret.layers) {
            if (s == slot) updates.push_back({values, ret.n_samples});
          }
        }
        if (updates.empty()) continue;  // untouched layer keeps its parameters
        auto& layer = llm.layers[static_cast<std::size_t>(llm.first_adapter_layer() + slot)];
        const auto prev = lm::lora_flat(layer);
        const auto merged = config.agg_mode == cfg::AggMode::eq8
                                ? tke::aggregate_lora(updates, prev, c)
                                : tke::aggregate_fedavg(updates, prev, c);
        lm::set_lora_flat(layer, merged);
      }

      // re-dispatch the adapter so clients start the next round in sync
      const auto bundle = lm::dispatch_adapter(llm);
      const std::size_t bundle_bytes = adapter_bundle_bytes(bundle);
      for (int i = 0; i < c; ++i) {
        shared.adapter[static_cast<std::size_t>(i)]->push(AdapterMsg{r, bundle, bundle_bytes});
      }

      {
        auto& log = shared.logs[static_cast<std::size_t>(r)];
        log.round = r;
        log.frozen = !fresh;
        log.server.l1 = l1_total;
        log.server.l2 = l2_total;
        log.server.selected = selected;
        log.server.ratios = layer_ratios;
        shared.ledger.rounds[static_cast<std::size_t>(r)].frozen = !fresh;
      }
    }
  };

  std::vector<std::thread> threads;
  threads.emplace_back([&] {
    try {
      server_body();
    } catch (...) {
      shared.record_failure();
    }
  });
  for (int i = 0; i < c; ++i) {
    threads.emplace_back([&, i] {
      try {
        client_body(clients[static_cast<std::size_t>(i)]);
      } catch (...) {
        shared.record_failure();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (shared.failure) std::rethrow_exception(shared.failure);

  // ---- evaluation ---------------------------------------------------------
  std::vector<lm::Model> slms;
  for (const auto& cl : clients) slms.push_back(cl.slm);
  EvalModelSource source;
  source.per_client = &slms;
  const auto metrics = evaluate_tasks(config, ds, source, config.eval_tasks);

  RunResult result;
  result.rounds = shared.logs;
  result.ledger = shared.ledger;
  result.metrics = metrics;
  for (const auto& cl : clients) result.final_tpa.push_back(cl.tpa_params.flatten());

  // ---- report ---------------------------------------------------------
  json report;
  report["header"] = {{"created", iso_timestamp()},
                      {"kernel_backend", std::string(kernels::backend_name())},
                      {"config", cfg::describe(config)}};
  report["rounds"] = json::array();
  for (const auto& log : shared.logs) {
    json jr;
    jr["round"] = log.round;
    jr["frozen"] = log.frozen;
    jr["server"] = {{"l1", log.server.l1},
                    {"l2", log.server.l2},
                    {"selected", log.server.selected},
                    {"ratios", log.server.ratios}};
    jr["clients"] = json::array();
    for (const auto& cl : log.clients) {
      jr["clients"].push_back({{"l1", cl.l1},
                               {"l2", cl.l2},
                               {"l3", cl.l3},
                               {"selected", cl.selected},
                               {"ratios", cl.ratios}});
    }
    const auto& rc = shared.ledger.rounds[static_cast<std::size_t>(log.round)];
    jr["comm"] = {{"embedding_up", rc.embedding_up}, {"result_up", rc.result_up},
                  {"result_down", rc.result_down},   {"lora_up", rc.lora_up},
                  {"adapter_down", rc.adapter_down}, {"tpa_agg", rc.tpa_agg}};
    report["rounds"].push_back(std::move(jr));
  }
  report["metrics"] = json::array();
  for (const auto& m : metrics) {
    json jm;
    jm["task"] = tasks::task_name(m.task);
    jm["seen_in_training"] = m.seen_in_training;
    jm["support"] = m.support;
    if (m.f1.has_value()) jm["f1"] = *m.f1;
    if (m.sed_m.has_value()) jm["sed_m"] = *m.sed_m;
    if (m.oracle_sed_m.has_value()) jm["oracle_sed_m"] = *m.oracle_sed_m;
    if (m.all_positive_f1.has_value()) jm["all_positive_f1"] = *m.all_positive_f1;
    report["metrics"].push_back(std::move(jm));
  }
  const auto totals = shared.ledger.totals();
  report["comm_totals"] = {{"embedding_up", totals.embedding_up}, {"result_up", totals.result_up},
                           {"result_down", totals.result_down},   {"lora_up", totals.lora_up},
                           {"adapter_down", totals.adapter_down}, {"tpa_agg", totals.tpa_agg}};

  if (!config.out_dir.empty()) {
    std::filesystem::create_directories(config.out_dir);
    const auto dir = std::filesystem::path(config.out_dir);
    lm::save_checkpoint(llm, (dir / "llm.bin").string(), (dir / "llm.manifest").string());
    lm::save_checkpoint(clients[0].slm, (dir / "slm0.bin").string(),
                        (dir / "slm0.manifest").string());
    {
      std::ofstream tb(dir / "tpa.bin", std::ios::binary);
      const auto flat = clients[0].tpa_params.flatten();
      tb.write(reinterpret_cast<const char*>(flat.data()),
               static_cast<std::streamsize>(flat.size() * sizeof(double)));
      std::ofstream tm(dir / "tpa.manifest");
      tm << "tpa embed=" << tpa::kEmbedDim << " hidden=" << tpa::kHiddenDim
         << " params=" << flat.size() << "\n";
    }
    report["checkpoints"] = {{"llm", (dir / "llm.bin").string()},
                             {"slm0", (dir / "slm0.bin").string()},
                             {"tpa", (dir / "tpa.bin").string()}};
    result.out_dir = config.out_dir;
  }

  result.report_json = report.dump(2);
  if (!config.out_dir.empty() && config.write_json) {
    std::ofstream out(std::filesystem::path(config.out_dir) / "report.json");
    out << result.report_json << "\n";
  }
  return result;
}

std::vector<TaskMetric> evaluate_checkpoint(const cfg::RunConfig& config,
                                            const std::string& slm_bin,
                                            const std::string& slm_manifest,
                                            const std::vector<TaskKind>& eval_tasks) {
  const Dataset ds = prepare_dataset(config);
  const lm::Model slm = lm::load_checkpoint(slm_bin, slm_manifest);
  EvalModelSource source;
  source.single = &slm;
  return evaluate_tasks(config, ds, source, eval_tasks);
}

GeneratedPaths generate_dataset_files(const cfg::RunConfig& config, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const Dataset ds = prepare_dataset(config);
  const auto dir = std::filesystem::path(out_dir);
  GeneratedPaths paths;
  std::vector<geo::Trajectory> train, test;
  for (int pi : ds.train_parents) train.push_back(ds.parents[static_cast<std::size_t>(pi)].observed);
  for (int pi : ds.test_parents) test.push_back(ds.parents[static_cast<std::size_t>(pi)].observed);
  paths.train_csv = (dir / "train.csv").string();
  paths.test_csv = (dir / "test.csv").string();
  paths.roads_csv = (dir / "roads.csv").string();
  geo::save_csv(train, paths.train_csv);
  geo::save_csv(test, paths.test_csv);
  tasks::save_road_csv(ds.roads, paths.roads_csv);
  return paths;
}

}  // namespace fedtraj::fpo
