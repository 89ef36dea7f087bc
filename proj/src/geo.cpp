#include "fedtraj/geo.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace fedtraj::geo {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kDegToRad = kPi / 180.0;
}  // namespace

bool point_valid(const Pt& p) {
  return std::isfinite(p.lon) && std::isfinite(p.lat) && p.lon >= -180.0 && p.lon <= 180.0 &&
         p.lat >= -90.0 && p.lat <= 90.0;
}

double dist_m(const Pt& a, const Pt& b) {
  const double mean_lat = 0.5 * (a.lat + b.lat) * kDegToRad;
  const double dx = (b.lon - a.lon) * kDegToRad * std::cos(mean_lat);
  const double dy = (b.lat - a.lat) * kDegToRad;
  return kEarthRadiusM * std::hypot(dx, dy);
}

double dist_point_segment_m(const Pt& p, double a_lon, double a_lat, double b_lon, double b_lat) {
  const double mean_lat = (p.lat + 0.5 * (a_lat + b_lat)) * 0.5 * kDegToRad;
  const double cosf = std::cos(mean_lat);
  // local meters frame
  const double px = p.lon * kDegToRad * cosf * kEarthRadiusM;
  const double py = p.lat * kDegToRad * kEarthRadiusM;
  const double ax = a_lon * kDegToRad * cosf * kEarthRadiusM;
  const double ay = a_lat * kDegToRad * kEarthRadiusM;
  const double bx = b_lon * kDegToRad * cosf * kEarthRadiusM;
  const double by = b_lat * kDegToRad * kEarthRadiusM;
  const double vx = bx - ax, vy = by - ay;
  const double wx = px - ax, wy = py - ay;
  const double vv = vx * vx + vy * vy;
  double s = vv > 0.0 ? (wx * vx + wy * vy) / vv : 0.0;
  s = std::clamp(s, 0.0, 1.0);
  return std::hypot(px - (ax + s * vx), py - (ay + s * vy));
}

void validate(const Trajectory& traj) {
  if (traj.points.empty()) fail(Err::InvariantViolation, "trajectory " + traj.traj_id + " has no points");
  for (std::size_t i = 0; i < traj.points.size(); ++i) {
    if (!point_valid(traj.points[i]))
      fail(Err::InvariantViolation,
           "trajectory " + traj.traj_id + " point " + std::to_string(i) + " out of range");
    if (i > 0 && traj.points[i].t <= traj.points[i - 1].t)
      fail(Err::NonMonotonicTime,
           "trajectory " + traj.traj_id + " time not strictly increasing at index " + std::to_string(i));
  }
}

int RegionPartition::cell_index(const Pt& p) const {
  if (!bbox.contains(p))
    fail(Err::PointOutsidePartition,
         "point (" + std::to_string(p.lon) + ", " + std::to_string(p.lat) + ") outside partition bbox");
  const double cell_w = (bbox.lon_max - bbox.lon_min) / cols;
  const double cell_h = (bbox.lat_max - bbox.lat_min) / rows;
  // floor puts an on-edge coordinate into the higher-index cell
  int col = static_cast<int>(std::floor((p.lon - bbox.lon_min) / cell_w));
  int row = static_cast<int>(std::floor((p.lat - bbox.lat_min) / cell_h));
  col = std::clamp(col, 0, cols - 1);
  row = std::clamp(row, 0, rows - 1);
  return row * cols + col;
}

int RegionPartition::client_of(const Pt& p) const { return cell_to_client.at(cell_index(p)); }

int RegionPartition::num_clients() const {
  int hi = -1;
  for (int c : cell_to_client) hi = std::max(hi, c);
  return hi + 1;
}

RegionPartition make_grid_partition(const BBox& bbox, int rows, int cols) {
  RegionPartition part;
  part.bbox = bbox;
  part.rows = rows;
  part.cols = cols;
  part.cell_to_client.resize(static_cast<std::size_t>(rows) * cols);
  for (std::size_t i = 0; i < part.cell_to_client.size(); ++i) part.cell_to_client[i] = static_cast<int>(i);
  return part;
}

std::vector<SubTrajectory> partition_trajectory(const Trajectory& traj, const RegionPartition& part) {
  validate(traj);
  std::vector<SubTrajectory> subs;
  int segment = 0;
  for (const Pt& p : traj.points) {
    const int client = part.client_of(p);
    if (subs.empty() || subs.back().client_id != client) {
      subs.push_back(SubTrajectory{traj.traj_id, client, segment++, {}});
    }
    subs.back().points.push_back(p);
  }
  return subs;
}

Trajectory reassemble(const std::vector<SubTrajectory>& subs) {
  if (subs.empty()) fail(Err::MissingSegment, "no segments to reassemble");
  std::map<int, const SubTrajectory*> ordered;
  for (const auto& s : subs) {
    if (s.parent_id != subs.front().parent_id)
      fail(Err::InvariantViolation, "segments from different parents");
    ordered[s.segment_index] = &s;
  }
  Trajectory out;
  out.traj_id = subs.front().parent_id;
  int expect = 0;
  for (const auto& [idx, sub] : ordered) {
    if (idx != expect++) fail(Err::MissingSegment, "missing segment " + std::to_string(expect - 1));
    out.points.insert(out.points.end(), sub->points.begin(), sub->points.end());
  }
  for (std::size_t i = 1; i < out.points.size(); ++i) {
    if (out.points[i].t <= out.points[i - 1].t)
      fail(Err::NonMonotonicTime, "reassembled time order broken at " + std::to_string(i));
  }
  return out;
}

const char* mode_name(TravelMode m) {
  switch (m) {
    case TravelMode::walk: return "walk";
    case TravelMode::bike: return "bike";
    case TravelMode::bus: return "bus";
    case TravelMode::car: return "car";
  }
  return "?";
}

namespace {

// target mean speeds per mode, chosen inside the classifier bands
// walk < 2, bike < 6, bus < 15, car >= 15 (m/s)
double mode_speed(TravelMode m) {
  switch (m) {
    case TravelMode::walk: return 1.2;
    case TravelMode::bike: return 4.0;
    case TravelMode::bus: return 9.0;
    case TravelMode::car: return 18.0;
  }
  return 1.0;
}

}  // namespace

SynthDataset synth_generate(const SynthSpec& spec) {
  if (spec.n_users <= 0 || spec.points_per_traj <= 0) fail(Err::ConfigError, "synth counts must be positive");
  SynthDataset out;
  const double lon_span = spec.bbox.lon_max - spec.bbox.lon_min;
  const double lat_span = spec.bbox.lat_max - spec.bbox.lat_min;
  for (int ti = 0; ti < spec.n_trajs; ++ti) {
    Rng rng(hash_mix(spec.seed, 0x7261 /*"tr"*/, static_cast<std::uint64_t>(ti)));
    const int user = ti % spec.n_users;
    const auto mode = static_cast<TravelMode>(rng.uniform_int(0, 3));
    const double target_speed = mode_speed(mode);

    // users get a stable home corner so trajectories are linkable
    Rng home_rng(hash_mix(spec.seed, 0x686f /*"ho"*/, static_cast<std::uint64_t>(user)));
    const double home_lon = spec.bbox.lon_min + lon_span * (0.15 + 0.7 * home_rng.uniform());
    const double home_lat = spec.bbox.lat_min + lat_span * (0.15 + 0.7 * home_rng.uniform());

    Trajectory traj;
    traj.traj_id = "t" + std::to_string(ti);
    traj.user_id = "u" + std::to_string(user);
    traj.points.reserve(spec.points_per_traj);

    double lon = home_lon + 0.02 * lon_span * rng.normal();
    double lat = home_lat + 0.02 * lat_span * rng.normal();
    lon = std::clamp(lon, spec.bbox.lon_min, spec.bbox.lon_max);
    lat = std::clamp(lat, spec.bbox.lat_min, spec.bbox.lat_max);
    double heading = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    double speed = target_speed;
    std::int64_t t = spec.t_start + static_cast<std::int64_t>(ti) * 100000;

    const double mean_lat_rad = 0.5 * (spec.bbox.lat_min + spec.bbox.lat_max) * kDegToRad;
    const double m_per_deg_lat = kEarthRadiusM * kDegToRad;
    const double m_per_deg_lon = m_per_deg_lat * std::cos(mean_lat_rad);

    for (int pi = 0; pi < spec.points_per_traj; ++pi) {
      traj.points.push_back(Pt{lon, lat, t});
      heading += 0.35 * rng.normal();
      speed = std::max(0.2, speed + 0.15 * target_speed * rng.normal());
      // drift back toward the target speed so the mode class stays separable
      speed += 0.2 * (target_speed - speed);
      const double step_m = speed * static_cast<double>(spec.dt_seconds);
      lon += step_m * std::cos(heading) / m_per_deg_lon;
      lat += step_m * std::sin(heading) / m_per_deg_lat;
      // reflect at walls
      if (lon < spec.bbox.lon_min) { lon = 2 * spec.bbox.lon_min - lon; heading = kPi - heading; }
      if (lon > spec.bbox.lon_max) { lon = 2 * spec.bbox.lon_max - lon; heading = kPi - heading; }
      if (lat < spec.bbox.lat_min) { lat = 2 * spec.bbox.lat_min - lat; heading = -heading; }
      if (lat > spec.bbox.lat_max) { lat = 2 * spec.bbox.lat_max - lat; heading = -heading; }
      lon = std::clamp(lon, spec.bbox.lon_min, spec.bbox.lon_max);
      lat = std::clamp(lat, spec.bbox.lat_min, spec.bbox.lat_max);
      t += spec.dt_seconds;
    }
    double total = 0.0;
    for (std::size_t i = 1; i < traj.points.size(); ++i)
      total += dist_m(traj.points[i - 1], traj.points[i]);
    const double mean_speed =
        traj.points.size() > 1
            ? total / (static_cast<double>(traj.points.back().t - traj.points.front().t))
            : 0.0;
    out.trajectories.push_back(std::move(traj));
    out.metas.push_back(SynthMeta{user, mode, mean_speed});
  }
  return out;
}

namespace {
constexpr double kPiLocal = 3.14159265358979323846;
}

std::pair<Trajectory, GroundTruth> corrupt(const Trajectory& traj, const CorruptionSpec& spec) {
  validate(traj);
  if (spec.rate < 0.0 || spec.rate > 1.0) fail(Err::ConfigError, "corruption rate must be in [0,1]");
  if (spec.magnitude < 0.0) fail(Err::ConfigError, "corruption magnitude must be >= 0");
  Rng rng(hash_mix(spec.seed, fnv1a(traj.traj_id), static_cast<std::uint64_t>(spec.kind)));
  const std::size_t n = traj.points.size();
  Trajectory out = traj;
  GroundTruth gt;

  auto pick_indices = [&](std::size_t count, std::size_t lo, std::size_t hi) {
    // sample `count` distinct indices in [lo, hi) without replacement
    std::vector<std::size_t> pool;
    for (std::size_t i = lo; i < hi; ++i) pool.push_back(i);
    std::vector<std::size_t> chosen;
    for (std::size_t c = 0; c < count && !pool.empty(); ++c) {
      const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1));
      chosen.push_back(pool[j]);
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
  };

  const double mean_lat_rad = traj.points.front().lat * kDegToRad;
  const double m_per_deg_lat = kEarthRadiusM * kDegToRad;
  const double m_per_deg_lon = m_per_deg_lat * std::cos(mean_lat_rad);

  switch (spec.kind) {
    case CorruptionKind::noise: {
      gt.noise_mask.assign(n, 0);
      const std::size_t count = static_cast<std::size_t>(spec.rate * static_cast<double>(n));
      for (std::size_t idx : pick_indices(count, 0, n)) {
        const double r = std::abs(rng.normal()) * spec.magnitude;
        const double theta = rng.uniform(0.0, 2.0 * kPiLocal);
        out.points[idx].lon += r * std::cos(theta) / m_per_deg_lon;
        out.points[idx].lat += r * std::sin(theta) / m_per_deg_lat;
        gt.noise_mask[idx] = 1;
      }
      break;
    }
    case CorruptionKind::drop: {
      const std::size_t count = std::min(static_cast<std::size_t>(spec.rate * static_cast<double>(n)),
                                         n >= 2 ? n - 2 : std::size_t{0});
      // endpoints stay so gaps remain bracketed
      const auto chosen = pick_indices(count, 1, n > 0 ? n - 1 : 0);
      std::vector<std::uint8_t> remove(n, 0);
      for (std::size_t idx : chosen) {
        remove[idx] = 1;
        gt.dropped.emplace_back(idx, traj.points[idx]);
      }
      out.points.clear();
      for (std::size_t i = 0; i < n; ++i)
        if (!remove[i]) out.points.push_back(traj.points[i]);
      break;
    }
    case CorruptionKind::duplicate: {
      const std::size_t count = static_cast<std::size_t>(spec.rate * static_cast<double>(n));
      std::vector<std::uint8_t> dup_after(n, 0);
      std::size_t placed = 0;
      for (std::size_t idx : pick_indices(count * 2, 0, n > 0 ? n - 1 : 0)) {
        if (placed == count) break;
        // need room for a +1s clone before the next timestamp
        if (traj.points[idx + 1].t - traj.points[idx].t > 1) {
          dup_after[idx] = 1;
          ++placed;
        }
      }
      out.points.clear();
      gt.duplicate_mask.clear();
      for (std::size_t i = 0; i < n; ++i) {
        out.points.push_back(traj.points[i]);
        gt.duplicate_mask.push_back(0);
        if (dup_after[i]) {
          Pt clone = traj.points[i];
          clone.t += 1;
          out.points.push_back(clone);
          gt.duplicate_mask.push_back(1);
        }
      }
      break;
    }
    case CorruptionKind::stay_inject: {
      // replace one window with a dwell; rate sets the window as a fraction
      // of the trajectory, magnitude is the dwell radius in meters
      if (n < 8 || spec.rate <= 0.0) break;
      const std::size_t win = std::max<std::size_t>(3, static_cast<std::size_t>(spec.rate * static_cast<double>(n)));
      const std::size_t begin =
          static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(n - win - 1)));
      const Pt anchor = traj.points[begin];
      for (std::size_t i = begin; i < begin + win; ++i) {
        const double r = rng.uniform(0.0, spec.magnitude);
        const double theta = rng.uniform(0.0, 2.0 * kPiLocal);
        out.points[i].lon = anchor.lon + r * std::cos(theta) / m_per_deg_lon;
        out.points[i].lat = anchor.lat + r * std::sin(theta) / m_per_deg_lat;
      }
      gt.stay_ranges.emplace_back(begin, begin + win);
      break;
    }
    case CorruptionKind::anomaly_detour: {
      if (rng.uniform() >= spec.rate || n < 8) break;
      // push a middle stretch sideways
      const std::size_t begin = n / 3, end = 2 * n / 3;
      for (std::size_t i = begin; i < end; ++i) {
        // perpendicular to local direction
        const Pt& a = traj.points[i > 0 ? i - 1 : 0];
        const Pt& b = traj.points[std::min(i + 1, n - 1)];
        double hx = (b.lon - a.lon) * m_per_deg_lon;
        double hy = (b.lat - a.lat) * m_per_deg_lat;
        const double norm = std::hypot(hx, hy);
        if (norm < 1e-9) { hx = 1.0; hy = 0.0; } else { hx /= norm; hy /= norm; }
        out.points[i].lon += -hy * spec.magnitude / m_per_deg_lon;
        out.points[i].lat += hx * spec.magnitude / m_per_deg_lat;
      }
      gt.anomaly = true;
      break;
    }
  }
  if (gt.noise_mask.empty()) gt.noise_mask.assign(out.points.size(), 0);
  if (gt.duplicate_mask.empty()) gt.duplicate_mask.assign(out.points.size(), 0);
  return {std::move(out), std::move(gt)};
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

double parse_f64(const std::string& s, std::size_t line_no) {
  double v = 0.0;
  const auto* begin = s.data();
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc{} || ptr != end)
    fail(Err::ParseError, "line " + std::to_string(line_no) + ": bad float '" + s + "'");
  return v;
}

std::int64_t parse_i64(const std::string& s, std::size_t line_no) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    fail(Err::ParseError, "line " + std::to_string(line_no) + ": bad integer '" + s + "'");
  return v;
}

}  // namespace

std::vector<Trajectory> load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Err::IoError, "cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) fail(Err::ParseError, "line 1: missing header");
  if (split_line(line) != std::vector<std::string>{"user_id", "traj_id", "t", "lon", "lat"})
    fail(Err::ParseError, "line 1: unexpected header '" + line + "'");

  std::vector<Trajectory> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_line(line);
    if (fields.size() != 5) fail(Err::ParseError, "line " + std::to_string(line_no) + ": expected 5 fields");
    Pt p{parse_f64(fields[3], line_no), parse_f64(fields[4], line_no), parse_i64(fields[2], line_no)};
    if (out.empty() || out.back().traj_id != fields[1]) {
      out.push_back(Trajectory{fields[1], fields[0], {}});
    }
    out.back().points.push_back(p);
  }
  for (const auto& traj : out) validate(traj);
  return out;
}

void save_csv(const std::vector<Trajectory>& trajs, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(Err::IoError, "cannot open " + path + " for writing");
  out << "user_id,traj_id,t,lon,lat\n";
  out.precision(17);
  // rows go out sorted by (traj_id, t); points are already time-ordered
  std::vector<const Trajectory*> ordered;
  for (const auto& traj : trajs) ordered.push_back(&traj);
  std::sort(ordered.begin(), ordered.end(),
            [](const Trajectory* a, const Trajectory* b) { return a->traj_id < b->traj_id; });
  for (const auto* traj : ordered) {
    for (const Pt& p : traj->points) {
      out << traj->user_id << ',' << traj->traj_id << ',' << p.t << ',' << p.lon << ',' << p.lat
          << '\n';
    }
  }
}

}  // namespace fedtraj::geo
