#include "fedtraj/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace fedtraj::cfg {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  const auto last = trim(cur);
  if (!last.empty() || !out.empty()) out.push_back(last);
  return out;
}

}  // namespace

IniFile IniFile::parse_string(const std::string& text) {
  IniFile ini;
  std::istringstream in(text);
  std::string line;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        fail(Err::ConfigError, "line " + std::to_string(line_no) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      ini.sections_[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(Err::ConfigError, "line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail(Err::ConfigError, "line " + std::to_string(line_no) + ": empty key");
    auto& sec = ini.sections_[section];
    if (sec.count(key) != 0)
      fail(Err::ConfigError, "line " + std::to_string(line_no) + ": duplicate key " + key);
    sec[key] = value;
  }
  return ini;
}

IniFile IniFile::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Err::IoError, "cannot open config " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_string(buf.str());
}

bool IniFile::has(const std::string& section, const std::string& key) const {
  const auto sec = sections_.find(section);
  return sec != sections_.end() && sec->second.count(key) != 0;
}

std::string IniFile::get_str(const std::string& section, const std::string& key,
                             const std::string& fallback) const {
  const auto sec = sections_.find(section);
  if (sec == sections_.end()) return fallback;
  const auto it = sec->second.find(key);
  return it == sec->second.end() ? fallback : it->second;
}

std::int64_t IniFile::get_int(const std::string& section, const std::string& key,
                              std::int64_t fallback) const {
  if (!has(section, key)) return fallback;
  const std::string v = get_str(section, key, "");
  try {
    std::size_t used = 0;
    const std::int64_t out = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    fail(Err::ConfigError, section + "." + key + ": expected an integer, got '" + v + "'");
  }
}

double IniFile::get_f64(const std::string& section, const std::string& key, double fallback) const {
  if (!has(section, key)) return fallback;
  const std::string v = get_str(section, key, "");
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    fail(Err::ConfigError, section + "." + key + ": expected a number, got '" + v + "'");
  }
}

bool IniFile::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  if (!has(section, key)) return fallback;
  const std::string v = get_str(section, key, "");
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(Err::ConfigError, section + "." + key + ": expected a boolean, got '" + v + "'");
}

void IniFile::validate(const std::map<std::string, std::vector<std::string>>& schema) const {
  for (const auto& [section, keys] : sections_) {
    const auto allowed = schema.find(section);
    if (allowed == schema.end()) fail(Err::ConfigError, "unknown config section [" + section + "]");
    for (const auto& [key, value] : keys) {
      if (std::find(allowed->second.begin(), allowed->second.end(), key) == allowed->second.end())
        fail(Err::ConfigError, "unknown config key " + section + "." + key);
    }
  }
}

namespace {

const std::map<std::string, std::vector<std::string>>& schema() {
  static const std::map<std::string, std::vector<std::string>> s = {
      {"dataset",
       {"n_users", "n_trajs", "points_per_traj", "bbox", "t_start", "dt_seconds", "seed",
        "test_fraction", "noise_rate", "noise_sigma_m", "stay_rate", "stay_radius_m", "drop_rate",
        "csv_path", "roads_path"}},
      {"partition", {"rows", "cols"}},
      {"tasks",
       {"train", "eval", "nf_speed_thresh", "spd_dist_thresh_m", "spd_time_thresh_s",
        "tsim_epsilon_m", "ad_detour_thresh_m"}},
      {"models", {"llm_layers", "slm_layers", "width", "lora_rank", "adapter_depth", "segment_slots"}},
      {"train",
       {"clients", "rounds", "freeze_period", "m_ratio", "sparse_scope", "agg_mode", "lr_tpa",
        "lr_slm", "lr_llm", "batch_points", "local_steps", "session_seed", "seed", "client_w1",
        "client_w2", "client_w3", "server_w1", "server_w2"}},
      {"output", {"dir", "json"}},
  };
  return s;
}

std::vector<tasks::TaskKind> parse_tasks(const std::string& csv, const char* which) {
  std::vector<tasks::TaskKind> out;
  for (const auto& name : split_csv(csv)) {
    const auto kind = tasks::task_from_name(name);
    if (!kind.has_value())
      fail(Err::ConfigError, std::string("tasks.") + which + ": unknown task '" + name + "'");
    out.push_back(*kind);
  }
  if (out.empty()) fail(Err::ConfigError, std::string("tasks.") + which + ": must not be empty");
  return out;
}

}  // namespace

RunConfig run_config_from_ini(const IniFile& ini) {
  ini.validate(schema());
  RunConfig c;
  c.n_users = static_cast<int>(ini.get_int("dataset", "n_users", c.n_users));
  c.n_trajs = static_cast<int>(ini.get_int("dataset", "n_trajs", c.n_trajs));
  c.points_per_traj = static_cast<int>(ini.get_int("dataset", "points_per_traj", c.points_per_traj));
  if (ini.has("dataset", "bbox")) {
    const auto parts = split_csv(ini.get_str("dataset", "bbox", ""));
    if (parts.size() != 4) fail(Err::ConfigError, "dataset.bbox needs lon_min,lat_min,lon_max,lat_max");
    c.bbox = geo::BBox{std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2]),
                       std::stod(parts[3])};
  }
  c.t_start = ini.get_int("dataset", "t_start", c.t_start);
  c.dt_seconds = ini.get_int("dataset", "dt_seconds", c.dt_seconds);
  c.data_seed = static_cast<std::uint64_t>(ini.get_int("dataset", "seed",
                                                        static_cast<std::int64_t>(c.data_seed)));
  c.test_fraction = ini.get_f64("dataset", "test_fraction", c.test_fraction);
  c.noise_rate = ini.get_f64("dataset", "noise_rate", c.noise_rate);
  c.noise_sigma_m = ini.get_f64("dataset", "noise_sigma_m", c.noise_sigma_m);
  c.stay_rate = ini.get_f64("dataset", "stay_rate", c.stay_rate);
  c.stay_radius_m = ini.get_f64("dataset", "stay_radius_m", c.stay_radius_m);
  c.drop_rate = ini.get_f64("dataset", "drop_rate", c.drop_rate);
  c.csv_path = ini.get_str("dataset", "csv_path", c.csv_path);
  c.roads_path = ini.get_str("dataset", "roads_path", c.roads_path);

  c.grid_rows = static_cast<int>(ini.get_int("partition", "rows", c.grid_rows));
  c.grid_cols = static_cast<int>(ini.get_int("partition", "cols", c.grid_cols));

  if (ini.has("tasks", "train")) c.train_tasks = parse_tasks(ini.get_str("tasks", "train", ""), "train");
  if (ini.has("tasks", "eval")) c.eval_tasks = parse_tasks(ini.get_str("tasks", "eval", ""), "eval");
  c.nf_speed_thresh = ini.get_f64("tasks", "nf_speed_thresh", c.nf_speed_thresh);
  c.spd_dist_thresh_m = ini.get_f64("tasks", "spd_dist_thresh_m", c.spd_dist_thresh_m);
  c.spd_time_thresh_s = ini.get_f64("tasks", "spd_time_thresh_s", c.spd_time_thresh_s);
  c.tsim_epsilon_m = ini.get_f64("tasks", "tsim_epsilon_m", c.tsim_epsilon_m);
  c.ad_detour_thresh_m = ini.get_f64("tasks", "ad_detour_thresh_m", c.ad_detour_thresh_m);

  c.llm_layers = static_cast<int>(ini.get_int("models", "llm_layers", c.llm_layers));
  c.slm_layers = static_cast<int>(ini.get_int("models", "slm_layers", c.slm_layers));
  c.width = static_cast<int>(ini.get_int("models", "width", c.width));
  c.lora_rank = static_cast<int>(ini.get_int("models", "lora_rank", c.lora_rank));
  c.adapter_depth = static_cast<int>(ini.get_int("models", "adapter_depth", c.adapter_depth));
  c.segment_slots = static_cast<int>(ini.get_int("models", "segment_slots", c.segment_slots));

  c.clients = static_cast<int>(ini.get_int("train", "clients", c.clients));
  c.rounds = static_cast<int>(ini.get_int("train", "rounds", c.rounds));
  c.freeze_period = static_cast<int>(ini.get_int("train", "freeze_period", c.freeze_period));
  c.m_ratio = ini.get_f64("train", "m_ratio", c.m_ratio);
  if (ini.has("train", "sparse_scope")) {
    const auto v = ini.get_str("train", "sparse_scope", "adapter");
    if (v == "adapter") c.sparse_scope = SparseScope::adapter;
    else if (v == "all") c.sparse_scope = SparseScope::all;
    else fail(Err::ConfigError, "train.sparse_scope must be adapter or all");
  }
  if (ini.has("train", "agg_mode")) {
    const auto v = ini.get_str("train", "agg_mode", "eq8");
    if (v == "eq8") c.agg_mode = AggMode::eq8;
    else if (v == "fedavg") c.agg_mode = AggMode::fedavg;
    else fail(Err::ConfigError, "train.agg_mode must be eq8 or fedavg");
  }
  c.lr_tpa = ini.get_f64("train", "lr_tpa", c.lr_tpa);
  c.lr_slm = ini.get_f64("train", "lr_slm", c.lr_slm);
  c.lr_llm = ini.get_f64("train", "lr_llm", c.lr_llm);
  c.batch_points = static_cast<int>(ini.get_int("train", "batch_points", c.batch_points));
  c.local_steps = static_cast<int>(ini.get_int("train", "local_steps", c.local_steps));
  if (c.local_steps < 1) fail(Err::ConfigError, "train.local_steps must be >= 1");
  c.session_seed = static_cast<std::uint64_t>(
      ini.get_int("train", "session_seed", static_cast<std::int64_t>(c.session_seed)));
  c.seed = static_cast<std::uint64_t>(ini.get_int("train", "seed", static_cast<std::int64_t>(c.seed)));
  c.client_w1 = ini.get_f64("train", "client_w1", c.client_w1);
  c.client_w2 = ini.get_f64("train", "client_w2", c.client_w2);
  c.client_w3 = ini.get_f64("train", "client_w3", c.client_w3);
  c.server_w1 = ini.get_f64("train", "server_w1", c.server_w1);
  c.server_w2 = ini.get_f64("train", "server_w2", c.server_w2);

  c.out_dir = ini.get_str("output", "dir", c.out_dir);
  c.write_json = ini.get_bool("output", "json", c.write_json);

  if (c.clients < 1) fail(Err::ConfigError, "train.clients must be >= 1");
  if (c.rounds < 1) fail(Err::ConfigError, "train.rounds must be >= 1");
  if (c.freeze_period < 1) fail(Err::ConfigError, "train.freeze_period must be >= 1");
  if (c.m_ratio <= 0.0 || c.m_ratio > 1.0) fail(Err::ConfigError, "train.m_ratio must be in (0, 1]");
  if (c.test_fraction < 0.0 || c.test_fraction >= 1.0)
    fail(Err::ConfigError, "dataset.test_fraction must be in [0, 1)");
  if (c.grid_rows * c.grid_cols < c.clients)
    fail(Err::ConfigError, "partition must have at least one cell per client");
  return c;
}

RunConfig load_run_config(const std::string& path) {
  return run_config_from_ini(IniFile::parse_file(path));
}

std::string describe(const RunConfig& c) {
  std::ostringstream out;
  out << "dataset.n_users=" << c.n_users << " dataset.n_trajs=" << c.n_trajs
      << " dataset.points_per_traj=" << c.points_per_traj << " dataset.seed=" << c.data_seed
      << " partition=" << c.grid_rows << "x" << c.grid_cols << " clients=" << c.clients
      << " rounds=" << c.rounds << " freeze_period=" << c.freeze_period << " m=" << c.m_ratio
      << " scope=" << (c.sparse_scope == SparseScope::adapter ? "adapter" : "all")
      << " agg=" << (c.agg_mode == AggMode::eq8 ? "eq8" : "fedavg") << " seed=" << c.seed
      << " session_seed=" << c.session_seed;
  out << " train=";
  for (std::size_t i = 0; i < c.train_tasks.size(); ++i)
    out << (i ? "," : "") << tasks::task_name(c.train_tasks[i]);
  out << " eval=";
  for (std::size_t i = 0; i < c.eval_tasks.size(); ++i)
    out << (i ? "," : "") << tasks::task_name(c.eval_tasks[i]);
  return out.str();
}

}  // namespace fedtraj::cfg
