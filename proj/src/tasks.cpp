#include "fedtraj/tasks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace fedtraj::tasks {

const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::AD: return "AD";
    case TaskKind::TI: return "TI";
    case TaskKind::NF: return "NF";
    case TaskKind::SPD: return "SPD";
    case TaskKind::MM: return "MM";
    case TaskKind::TUL: return "TUL";
    case TaskKind::TMI: return "TMI";
    case TaskKind::TSim: return "TSim";
    case TaskKind::TSeg: return "TSeg";
    case TaskKind::TR: return "TR";
  }
  return "?";
}

std::optional<TaskKind> task_from_name(const std::string& name) {
  for (int i = 0; i < kNumTasks; ++i) {
    const auto k = static_cast<TaskKind>(i);
    if (name == task_name(k)) return k;
  }
  return std::nullopt;
}

bool output_matches(TaskKind task, const TaskOutput& output) {
  switch (task) {
    case TaskKind::AD:
    case TaskKind::TUL:
    case TaskKind::TMI:
      return std::holds_alternative<Classification>(output);
    case TaskKind::SPD:
      return std::holds_alternative<PointsOut>(output);
    default:
      return std::holds_alternative<TrajectoryOut>(output);
  }
}

RoadNetwork load_road_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Err::IoError, "cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) fail(Err::ParseError, "line 1: missing header");
  RoadNetwork net;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    RoadSegment seg;
    char comma = 0;
    std::istringstream ss(line);
    if (!(ss >> seg.id >> comma >> seg.start_lon >> comma >> seg.start_lat >> comma >> seg.stop_lon >>
          comma >> seg.stop_lat))
      fail(Err::ParseError, "line " + std::to_string(line_no) + ": bad road segment");
    net.segments.push_back(seg);
  }
  return net;
}

void save_road_csv(const RoadNetwork& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(Err::IoError, "cannot open " + path + " for writing");
  out << "id,start_lon,start_lat,stop_lon,stop_lat\n";
  out.precision(17);
  for (const auto& s : net.segments) {
    out << s.id << ',' << s.start_lon << ',' << s.start_lat << ',' << s.stop_lon << ',' << s.stop_lat
        << '\n';
  }
}

StayPointResult oracle_stay_points(const Trajectory& traj, double dist_thresh_m, double time_thresh_s) {
  if (dist_thresh_m <= 0.0 || time_thresh_s <= 0.0) fail(Err::ConfigError, "stay thresholds must be > 0");
  StayPointResult res;
  const auto& pts = traj.points;
  res.member_mask.assign(pts.size(), 0);
  std::size_t i = 0;
  while (i < pts.size()) {
    // extend j while the window's spatial diameter stays under threshold
    std::size_t j = i;
    while (j + 1 < pts.size()) {
      bool ok = true;
      for (std::size_t a = i; a <= j && ok; ++a) {
        if (geo::dist_m(pts[a], pts[j + 1]) > dist_thresh_m) ok = false;
      }
      if (!ok) break;
      ++j;
    }
    const double duration = static_cast<double>(pts[j].t - pts[i].t);
    if (j > i && duration >= time_thresh_s) {
      Pt rep{0.0, 0.0, 0};
      for (std::size_t a = i; a <= j; ++a) {
        rep.lon += pts[a].lon;
        rep.lat += pts[a].lat;
      }
      const auto count = static_cast<double>(j - i + 1);
      rep.lon /= count;
      rep.lat /= count;
      rep.t = pts[i].t + (pts[j].t - pts[i].t) / 2;
      res.representatives.push_back(rep);
      res.ranges.emplace_back(i, j + 1);
      for (std::size_t a = i; a <= j; ++a) res.member_mask[a] = 1;
      i = j + 1;
    } else {
      ++i;
    }
  }
  return res;
}

NoiseFilterResult oracle_noise_filter(const Trajectory& traj, double speed_thresh_mps) {
  if (speed_thresh_mps <= 0.0) fail(Err::ConfigError, "speed threshold must be > 0");
  NoiseFilterResult res;
  const auto& pts = traj.points;
  res.keep.assign(pts.size(), 1);
  for (std::size_t i = 1; i + 1 < pts.size(); ++i) {
    const double v_prev =
        geo::dist_m(pts[i - 1], pts[i]) / static_cast<double>(pts[i].t - pts[i - 1].t);
    const double v_next =
        geo::dist_m(pts[i], pts[i + 1]) / static_cast<double>(pts[i + 1].t - pts[i].t);
    if (v_prev > speed_thresh_mps && v_next > speed_thresh_mps) res.keep[i] = 0;
  }
  res.filtered.traj_id = traj.traj_id;
  res.filtered.user_id = traj.user_id;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (res.keep[i]) res.filtered.points.push_back(pts[i]);
  return res;
}

namespace {

// deviation of p from its time-synchronized position on segment (a, b)
double sync_deviation_m(const Pt& p, const Pt& a, const Pt& b) {
  const double span = static_cast<double>(b.t - a.t);
  const double s = span > 0.0 ? static_cast<double>(p.t - a.t) / span : 0.0;
  const Pt sync{a.lon + s * (b.lon - a.lon), a.lat + s * (b.lat - a.lat), p.t};
  return geo::dist_m(p, sync);
}

void dp_recurse(const std::vector<Pt>& pts, std::size_t lo, std::size_t hi, double epsilon,
                std::vector<std::uint8_t>& kept) {
  if (hi <= lo + 1) return;
  double max_dev = -1.0;
  std::size_t split = lo;
  for (std::size_t i = lo + 1; i < hi; ++i) {
    const double dev = sync_deviation_m(pts[i], pts[lo], pts[hi]);
    if (dev > max_dev) {
      max_dev = dev;
      split = i;
    }
  }
  if (max_dev > epsilon) {
    kept[split] = 1;
    dp_recurse(pts, lo, split, epsilon, kept);
    dp_recurse(pts, split, hi, epsilon, kept);
  }
}

}  // namespace

SimplifyResult oracle_simplify(const Trajectory& traj, double epsilon_m) {
  if (epsilon_m < 0.0) fail(Err::ConfigError, "epsilon must be >= 0");
  if (traj.points.size() < 2) fail(Err::InvariantViolation, "simplify needs >= 2 points");
  SimplifyResult res;
  res.kept.assign(traj.points.size(), 0);
  res.kept.front() = 1;
  res.kept.back() = 1;
  dp_recurse(traj.points, 0, traj.points.size() - 1, epsilon_m, res.kept);
  res.simplified.traj_id = traj.traj_id;
  res.simplified.user_id = traj.user_id;
  for (std::size_t i = 0; i < traj.points.size(); ++i)
    if (res.kept[i]) res.simplified.points.push_back(traj.points[i]);
  return res;
}

MapMatchResult oracle_map_match(const Trajectory& traj, const RoadNetwork& net) {
  if (net.segments.empty()) fail(Err::EmptyNetwork, "road network is empty");
  MapMatchResult res;
  res.snapped.traj_id = traj.traj_id;
  res.snapped.user_id = traj.user_id;
  for (const Pt& p : traj.points) {
    double best = std::numeric_limits<double>::infinity();
    const RoadSegment* best_seg = nullptr;
    for (const auto& seg : net.segments) {
      const double d = geo::dist_point_segment_m(p, seg.start_lon, seg.start_lat, seg.stop_lon, seg.stop_lat);
      // ties go to the lower segment id
      if (d < best || (d == best && best_seg != nullptr && seg.id < best_seg->id)) {
        best = d;
        best_seg = &seg;
      }
    }
    res.segment_ids.push_back(best_seg->id);
    // project onto the chosen segment in the local frame
    const double mean_lat =
        (p.lat + 0.5 * (best_seg->start_lat + best_seg->stop_lat)) * 0.5 * 3.14159265358979323846 / 180.0;
    const double cosf = std::cos(mean_lat);
    const double ax = best_seg->start_lon * cosf, ay = best_seg->start_lat;
    const double bx = best_seg->stop_lon * cosf, by = best_seg->stop_lat;
    const double px = p.lon * cosf, py = p.lat;
    const double vx = bx - ax, vy = by - ay;
    const double vv = vx * vx + vy * vy;
    double s = vv > 0.0 ? ((px - ax) * vx + (py - ay) * vy) / vv : 0.0;
    s = std::clamp(s, 0.0, 1.0);
    res.snapped.points.push_back(Pt{(ax + s * vx) / cosf, ay + s * vy, p.t});
  }
  return res;
}

namespace {

Trajectory interpolate_missing(const Trajectory& observed, const std::vector<std::int64_t>& missing) {
  if (observed.points.size() < 2 && !missing.empty())
    fail(Err::UnbracketedGap, "need >= 2 observed points to bracket gaps");
  std::vector<std::int64_t> missing_t = missing;
  std::sort(missing_t.begin(), missing_t.end());
  missing_t.erase(std::unique(missing_t.begin(), missing_t.end()), missing_t.end());
  Trajectory out = observed;
  for (const std::int64_t t : missing_t) {
    if (t < observed.points.front().t || t > observed.points.back().t)
      fail(Err::UnbracketedGap, "missing timestamp " + std::to_string(t) + " outside observed span");
    const auto it = std::lower_bound(
        observed.points.begin(), observed.points.end(), t,
        [](const Pt& p, std::int64_t value) { return p.t < value; });
    if (it != observed.points.end() && it->t == t) continue;  // already observed
    const Pt& hi = *it;
    const Pt& lo = *(it - 1);
    const double s = static_cast<double>(t - lo.t) / static_cast<double>(hi.t - lo.t);
    out.points.push_back(Pt{lo.lon + s * (hi.lon - lo.lon), lo.lat + s * (hi.lat - lo.lat), t});
  }
  std::sort(out.points.begin(), out.points.end(), [](const Pt& a, const Pt& b) { return a.t < b.t; });
  return out;
}

}  // namespace

Trajectory oracle_impute(const Trajectory& observed, const std::vector<std::int64_t>& missing_t) {
  return interpolate_missing(observed, missing_t);
}

Trajectory oracle_recover(const Trajectory& observed, const std::vector<std::int64_t>& missing_t) {
  return interpolate_missing(observed, missing_t);
}

std::vector<std::uint8_t> oracle_segment(const Trajectory& traj, const StayPointResult& stays) {
  std::vector<std::uint8_t> starts(traj.points.size(), 0);
  if (!starts.empty()) starts[0] = 1;
  for (const auto& [begin, end] : stays.ranges) {
    if (begin < starts.size()) starts[begin] = 1;   // segment ends where a stay begins
    if (end < starts.size()) starts[end] = 1;       // and a new one starts after it
  }
  return starts;
}

bool oracle_anomaly(const Trajectory& traj, const Trajectory& reference_route, double detour_thresh_m) {
  double max_dev = 0.0;
  for (const Pt& p : traj.points) {
    double best = std::numeric_limits<double>::infinity();
    const auto& ref = reference_route.points;
    if (ref.size() == 1) {
      best = geo::dist_m(p, ref.front());
    } else {
      for (std::size_t i = 0; i + 1 < ref.size(); ++i) {
        best = std::min(best, geo::dist_point_segment_m(p, ref[i].lon, ref[i].lat, ref[i + 1].lon,
                                                        ref[i + 1].lat));
      }
    }
    max_dev = std::max(max_dev, best);
  }
  return max_dev > detour_thresh_m;
}

SpeedClass speed_class(double mean_speed_mps) {
  if (mean_speed_mps < 2.0) return SpeedClass::walk;
  if (mean_speed_mps < 6.0) return SpeedClass::bike;
  if (mean_speed_mps < 15.0) return SpeedClass::bus;
  return SpeedClass::car;
}

int label_tmi(const geo::SynthMeta& meta) { return static_cast<int>(speed_class(meta.mean_speed_mps)); }

int label_tul(const geo::SynthMeta& meta) { return meta.user_index; }

double f1_binary(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size() || predicted.empty())
    fail(Err::LengthMismatch, "f1 inputs must be equal-length and non-empty");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] == 1 && truth[i] == 1) ++tp;
    if (predicted[i] == 1 && truth[i] != 1) ++fp;
    if (predicted[i] != 1 && truth[i] == 1) ++fn;
  }
  const double denom = static_cast<double>(2 * tp + fp + fn);
  return denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
}

double f1_macro(const std::vector<int>& predicted, const std::vector<int>& truth, int n_classes) {
  if (predicted.size() != truth.size() || predicted.empty())
    fail(Err::LengthMismatch, "f1 inputs must be equal-length and non-empty");
  double total = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      if (predicted[i] == c && truth[i] == c) ++tp;
      if (predicted[i] == c && truth[i] != c) ++fp;
      if (predicted[i] != c && truth[i] == c) ++fn;
    }
    const double denom = static_cast<double>(2 * tp + fp + fn);
    total += denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
  }
  return total / static_cast<double>(n_classes);
}

double sed(const Trajectory& simplified, const Trajectory& original) {
  const auto& s = simplified.points;
  const auto& o = original.points;
  if (s.empty() || o.empty() || s.front() != o.front() || s.back() != o.back())
    fail(Err::NotSubsequence, "simplified must share endpoints with original");
  // subsequence check while accumulating deviations
  std::size_t si = 0;
  double total = 0.0;
  for (const Pt& p : o) {
    if (si + 1 < s.size() && p == s[si + 1]) ++si;
    if (p == s[si]) continue;  // vertex of the simplified line, deviation 0
    if (si + 1 >= s.size()) fail(Err::NotSubsequence, "simplified is not a subsequence");
    if (p.t <= s[si].t || p.t >= s[si + 1].t)
      fail(Err::NotSubsequence, "original point falls outside the bracketing segment");
    total += sync_deviation_m(p, s[si], s[si + 1]);
  }
  return total / static_cast<double>(o.size());
}

}  // namespace fedtraj::tasks
