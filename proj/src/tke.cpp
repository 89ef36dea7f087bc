#include "fedtraj/tke.hpp"

#include <algorithm>
#include <cmath>

#include "fedtraj/kernels.hpp"

namespace fedtraj::tke {

OutputFormat format_for(TaskKind task) {
  switch (task) {
    case TaskKind::AD:
    case TaskKind::TUL:
    case TaskKind::TMI:
      return OutputFormat::classification;
    case TaskKind::SPD:
      return OutputFormat::points;
    default:
      return OutputFormat::trajectory;
  }
}

const char* task_description(TaskKind task) {
  switch (task) {
    case TaskKind::AD: return "flag trajectories that deviate from typical movement";
    case TaskKind::TI: return "fill in missing points from the surrounding context";
    case TaskKind::NF: return "identify and remove points that do not belong to the path";
    case TaskKind::SPD: return "find locations where the object dwells within a small area";
    case TaskKind::MM: return "snap each point to the most likely road segment";
    case TaskKind::TUL: return "match an anonymous trajectory to its user";
    case TaskKind::TMI: return "determine the travel mode from the movement pattern";
    case TaskKind::TSim: return "reduce the point count while keeping the shape";
    case TaskKind::TSeg: return "split the trajectory into meaningful segments";
    case TaskKind::TR: return "rebuild the complete trajectory from partial observations";
  }
  return "";
}

Prompt build_prompt(TaskKind task, const std::vector<geo::Pt>* raw_points,
                    const std::vector<tpa::Embedding>* embeddings, PromptInfo info,
                    OutputFormat format) {
  if (format != format_for(task))
    fail(Err::FormatTaskMismatch, std::string("format does not match task ") + tasks::task_name(task));
  if ((raw_points == nullptr) == (embeddings == nullptr))
    fail(Err::FormatTaskMismatch, "prompt data must be raw points or embeddings, exactly one");
  Prompt p;
  p.task = task;
  p.task_text = std::string(tasks::task_name(task)) + ": " + task_description(task);
  p.raw_points = raw_points;
  p.embeddings = embeddings;
  p.info = std::move(info);
  p.format = format;
  return p;
}

namespace {

struct Stats {
  double mean = 0.0, stddev = 0.0, min = 0.0, max = 0.0;
};

Stats stats_of(const std::vector<double>& xs) {
  Stats s;
  if (xs.empty()) return s;
  s.min = xs[0];
  s.max = xs[0];
  for (double x : xs) {
    s.mean += x;
    s.min = std::min(s.min, x);
    s.max = std::max(s.max, x);
  }
  s.mean /= static_cast<double>(xs.size());
  for (double x : xs) s.stddev += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(s.stddev / static_cast<double>(xs.size()));
  return s;
}

double squash(double x, double scale) { return x / (x + scale); }

}  // namespace

std::vector<double> featurize_prompt(const Prompt& prompt, const tpa::Normalization& norm) {
  std::vector<double> f(kPromptFeatureLen, 0.0);
  f[static_cast<std::size_t>(prompt.task)] = 1.0;

  std::size_t pos = 10;
  const std::size_t count =
      prompt.raw_points != nullptr ? prompt.raw_points->size() : prompt.embeddings->size();
  f[pos++] = squash(static_cast<double>(count), 100.0);

  if (prompt.raw_points != nullptr && !prompt.raw_points->empty()) {
    std::vector<double> lon, lat, dt;
    const auto& pts = *prompt.raw_points;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto u = norm.to_unit_raw(pts[i]);
      lon.push_back(u[0]);
      lat.push_back(u[1]);
      if (i > 0) dt.push_back(squash(static_cast<double>(pts[i].t - pts[i - 1].t), 60.0));
    }
    for (const auto* xs : {&lon, &lat, &dt}) {
      const Stats s = stats_of(*xs);
      f[pos++] = s.mean;
      f[pos++] = s.stddev;
      f[pos++] = s.min;
      f[pos++] = s.max;
    }
  } else {
    pos += 12;  // the server sees no raw coordinates
  }

  if (prompt.info.weather.has_value()) {
    f[pos + static_cast<std::size_t>(prompt.info.weather->cond)] = 1.0;
    f[pos + 4] = prompt.info.weather->temp_c / 40.0;
  }
  pos += 5;
  if (prompt.info.roads != nullptr && !prompt.info.roads->segments.empty() &&
      prompt.raw_points != nullptr && !prompt.raw_points->empty()) {
    double total = 0.0, best = std::numeric_limits<double>::infinity();
    for (const auto& p : *prompt.raw_points) {
      double nearest = std::numeric_limits<double>::infinity();
      for (const auto& seg : prompt.info.roads->segments) {
        nearest = std::min(nearest, geo::dist_point_segment_m(p, seg.start_lon, seg.start_lat,
                                                              seg.stop_lon, seg.stop_lat));
      }
      total += nearest;
      best = std::min(best, nearest);
    }
    f[pos] = squash(total / static_cast<double>(prompt.raw_points->size()), 100.0);
    f[pos + 1] = squash(best, 100.0);
  }
  pos += 2;
  f[pos + static_cast<std::size_t>(prompt.format)] = 1.0;
  return f;
}

double change_rate(std::span<const double> current, std::span<const double> previous) {
  if (current.size() != previous.size())
    fail(Err::ShapeMismatch, "change_rate needs equal-sized snapshots");
  double diff_sq = 0.0;
  for (std::size_t i = 0; i < current.size(); ++i) {
    const double d = current[i] - previous[i];
    diff_sq += d * d;
  }
  const double prev_norm = std::sqrt(kernels::sq_norm(previous.data(), previous.size()));
  return std::sqrt(diff_sq) / (prev_norm + 1e-12);
}

std::vector<double> ratios(std::span<const double> change_rates) {
  if (change_rates.empty()) fail(Err::ConfigError, "ratios need at least one layer");
  double total = 0.0;
  for (double cr : change_rates) {
    if (cr < 0.0) fail(Err::ConfigError, "change rates must be non-negative");
    total += cr;
  }
  std::vector<double> r(change_rates.size());
  if (total <= 0.0) {
    std::fill(r.begin(), r.end(), 1.0 / static_cast<double>(r.size()));
  } else {
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = change_rates[i] / total;
  }
  return r;
}

namespace {

void check_nm(std::size_t n, int n_m) {
  if (n_m < 0 || static_cast<std::size_t>(n_m) > n)
    fail(Err::InvalidNm, "n_m must lie in [0, layer count]");
}

// sums the inclusion probability of `layer` over every ordered prefix of
// distinct other layers, depth-first
double inclusion_prob(std::span<const double> r, int layer, int n_m) {
  const std::size_t n = r.size();
  std::vector<std::uint8_t> used(n, 0);
  double total = 0.0;
  const double target = r[static_cast<std::size_t>(layer)];

  auto dfs = [&](auto&& self, int depth, double prefix_prob, double prefix_sum) -> void {
    const double remaining = 1.0 - prefix_sum;
    if (remaining > 1e-15) total += prefix_prob * target / remaining;
    if (depth + 1 >= n_m) return;
    for (std::size_t j = 0; j < n; ++j) {
      if (used[j] || static_cast<int>(j) == layer || r[j] <= 0.0) continue;
      if (remaining <= 1e-15) continue;
      used[j] = 1;
      self(self, depth + 1, prefix_prob * r[j] / remaining, prefix_sum + r[j]);
      used[j] = 0;
    }
  };
  if (n_m >= 1) dfs(dfs, 0, 1.0, 0.0);
  return total;
}

}  // namespace

double selection_probability(std::span<const double> r, int layer, int n_m) {
  check_nm(r.size(), n_m);
  if (layer < 0 || static_cast<std::size_t>(layer) >= r.size())
    fail(Err::UnknownLayer, "layer index outside the ratio vector");
  if (n_m == 0) return 0.0;
  if (static_cast<std::size_t>(n_m) == r.size()) return 1.0;  // every layer trains
  return inclusion_prob(r, layer, n_m);
}

SelectionPlan select_layers(std::span<const double> r, int n_m, std::uint64_t seed, int round) {
  check_nm(r.size(), n_m);
  SelectionPlan plan;
  plan.round = round;
  plan.n_m = n_m;
  for (std::size_t i = 0; i < r.size(); ++i)
    plan.probabilities.push_back(selection_probability(r, static_cast<int>(i), n_m));

  Rng rng(hash_mix(seed, static_cast<std::uint64_t>(round), 0x73656c /*"sel"*/));
  std::vector<std::uint8_t> taken(r.size(), 0);
  for (int draw = 0; draw < n_m; ++draw) {
    double total = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i)
      if (!taken[i]) total += r[i];
    std::size_t pick = r.size();
    if (total > 0.0) {
      const double u = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (taken[i]) continue;
        acc += r[i];
        if (u < acc) {
          pick = i;
          break;
        }
      }
      if (pick == r.size()) {  // numeric edge: u == total
        for (std::size_t i = r.size(); i-- > 0;) {
          if (!taken[i] && r[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    } else {
      // all remaining ratios zero: fall back to a uniform draw
      std::vector<std::size_t> remaining;
      for (std::size_t i = 0; i < r.size(); ++i)
        if (!taken[i]) remaining.push_back(i);
      pick = remaining[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(remaining.size()) - 1))];
    }
    taken[pick] = 1;
    plan.selected.push_back(static_cast<int>(pick));
  }
  return plan;
}

std::vector<double> aggregate_lora(const std::vector<LoraUpdate>& updates,
                                   std::span<const double> prev_global, int total_clients) {
  if (updates.empty()) fail(Err::NoUpdates, "no client trained this layer in the round");
  if (static_cast<int>(updates.size()) > total_clients)
    fail(Err::ConfigError, "more updates than clients");
  double n_total = 0.0;
  for (const auto& u : updates) {
    if (u.n_samples <= 0.0) fail(Err::ConfigError, "update sample counts must be positive");
    if (u.values.size() != prev_global.size())
      fail(Err::ShapeMismatch, "update length does not match the global parameters");
    n_total += u.n_samples;
  }
  const double fresh_weight = static_cast<double>(total_clients) - static_cast<double>(updates.size());
  std::vector<double> out(prev_global.size(), 0.0);
  for (const auto& u : updates)
    kernels::axpy(u.n_samples / n_total, u.values.data(), out.data(), out.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (fresh_weight * out[i] + prev_global[i]) / (fresh_weight + 1.0);
  return out;
}

std::vector<double> aggregate_fedavg(const std::vector<LoraUpdate>& updates,
                                     std::span<const double> prev_global, int total_clients) {
  if (updates.empty()) fail(Err::NoUpdates, "no client trained this layer in the round");
  if (static_cast<int>(updates.size()) > total_clients)
    fail(Err::ConfigError, "more updates than clients");
  double n_total = 0.0;
  for (const auto& u : updates) {
    if (u.n_samples <= 0.0) fail(Err::ConfigError, "update sample counts must be positive");
    if (u.values.size() != prev_global.size())
      fail(Err::ShapeMismatch, "update length does not match the global parameters");
    n_total += u.n_samples;
  }
  std::vector<double> out(prev_global.size(), 0.0);
  for (const auto& u : updates)
    kernels::axpy(u.n_samples / n_total, u.values.data(), out.data(), out.size());
  return out;
}

ad::Graph::Id reverse_kl_loss(ad::Graph& g, ad::Graph::Id slm_probs, ad::Graph::Id llm_probs) {
  return g.kl_div(slm_probs, g.detach(llm_probs));
}

ad::Graph::Id forward_kl_loss(ad::Graph& g, ad::Graph::Id llm_probs, ad::Graph::Id slm_probs) {
  return g.kl_div(g.detach(slm_probs), llm_probs);
}

}  // namespace fedtraj::tke
