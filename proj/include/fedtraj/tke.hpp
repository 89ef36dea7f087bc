#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedtraj/autodiff.hpp"
#include "fedtraj/tasks.hpp"
#include "fedtraj/tpa.hpp"

namespace fedtraj::tke {

using tasks::TaskKind;

enum class Weather { sunny = 0, rain = 1, cloudy = 2, snow = 3 };

struct WeatherInfo {
  Weather cond = Weather::sunny;
  double temp_c = 15.0;
};

struct PromptInfo {
  const tasks::RoadNetwork* roads = nullptr;
  std::optional<WeatherInfo> weather;
};

enum class OutputFormat { classification = 0, points = 1, trajectory = 2 };

OutputFormat format_for(TaskKind task);
const char* task_description(TaskKind task);

// (Task, Data, Information, Format): data is raw points on a client or
// embeddings on the server, never both
struct Prompt {
  TaskKind task = TaskKind::NF;
  std::string task_text;
  const std::vector<geo::Pt>* raw_points = nullptr;
  const std::vector<tpa::Embedding>* embeddings = nullptr;
  PromptInfo info;
  OutputFormat format = OutputFormat::trajectory;
};

Prompt build_prompt(TaskKind task, const std::vector<geo::Pt>* raw_points,
                    const std::vector<tpa::Embedding>* embeddings, PromptInfo info,
                    OutputFormat format);  // FormatTaskMismatch

// task one-hot (10) | data stats: count + mean/std/min/max of normalized
// lon, lat, dt (13) | weather one-hot + temp/40 + road distances (7) |
// format one-hot (3). Data stats are zero for embedding prompts (the server
// never sees raw coordinates).
inline constexpr std::size_t kPromptFeatureLen = 33;
std::vector<double> featurize_prompt(const Prompt& prompt, const tpa::Normalization& norm);

// relative Frobenius change: |cur - prev| / (|prev| + eps)
double change_rate(std::span<const double> current, std::span<const double> previous);

// R_i = CR_i / sum CR; uniform when every CR is zero
std::vector<double> ratios(std::span<const double> change_rates);

// probability that the layer appears within n_m sequential draws without
// replacement, each proportional to the remaining ratios (the closed form
// summed by exhaustive prefix enumeration)
double selection_probability(std::span<const double> ratios, int layer, int n_m);  // InvalidNm

struct SelectionPlan {
  int round = 0;
  int n_m = 0;
  std::vector<int> selected;             // draw order, |selected| = n_m
  std::vector<double> probabilities;     // closed-form inclusion per layer
};

SelectionPlan select_layers(std::span<const double> ratios, int n_m, std::uint64_t seed,
                            int round = 0);  // InvalidNm

struct LayerStats {
  int layer_id = 0;
  std::vector<double> prev_params;
  double cr = 0.0;
  double ratio = 0.0;
};

struct LoraUpdate {
  std::vector<double> values;
  double n_samples = 0.0;  // > 0
};

// weighted aggregation:
// ((|C| - |C'|) * (sum n_j W_j / sum n_j) + prev) / (|C| - |C'| + 1);
// with every client participating this returns prev unchanged.
// NoUpdates when the update list is empty.
std::vector<double> aggregate_lora(const std::vector<LoraUpdate>& updates,
                                   std::span<const double> prev_global, int total_clients);

// conventional federated average of the same updates, for comparison runs
std::vector<double> aggregate_fedavg(const std::vector<LoraUpdate>& updates,
                                     std::span<const double> prev_global, int total_clients);

// Both losses evaluate KL(P_slm || P_llm); they differ only in which side
// keeps gradients — the other is detached.
ad::Graph::Id reverse_kl_loss(ad::Graph& g, ad::Graph::Id slm_probs, ad::Graph::Id llm_probs);
ad::Graph::Id forward_kl_loss(ad::Graph& g, ad::Graph::Id llm_probs, ad::Graph::Id slm_probs);

}  // namespace fedtraj::tke
