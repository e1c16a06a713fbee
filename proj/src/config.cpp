#include "dtsim/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace dtsim {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

}  // namespace

KvFile KvFile::parse(const std::string& text) {
  KvFile f;
  f.raw_ = text;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(strip_comment(line));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError("config line " + std::to_string(line_no) +
                          ": unterminated section header");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string val = trim(t.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": empty key or value");
    Value v;
    if (val.front() == '"') {
      if (val.size() < 2 || val.back() != '"')
        throw ConfigError("config line " + std::to_string(line_no) +
                          ": unterminated string");
      v.kind = 1;
      v.str = val.substr(1, val.size() - 2);
    } else if (val == "true" || val == "false") {
      v.kind = 2;
      v.b = val == "true";
    } else if (val.front() == '[') {
      if (val.back() != ']')
        throw ConfigError("config line " + std::to_string(line_no) +
                          ": unterminated array");
      v.kind = 3;
      std::string body = val.substr(1, val.size() - 2);
      for (auto& ch : body)
        if (ch == ',') ch = ' ';
      std::istringstream bs(body);
      double x;
      while (bs >> x) v.arr.push_back(x);
      if (!bs.eof())
        throw ConfigError("config line " + std::to_string(line_no) +
                          ": non-numeric array element");
    } else {
      v.kind = 0;
      try {
        std::size_t used = 0;
        v.num = std::stod(val, &used);
        if (used != val.size()) throw std::invalid_argument("");
      } catch (...) {
        throw ConfigError("config line " + std::to_string(line_no) +
                          ": cannot parse value '" + val + "'");
      }
    }
    f.sections_[section][key] = std::move(v);
  }
  return f;
}

KvFile KvFile::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

const KvFile::Value* KvFile::find(const std::string& s,
                                  const std::string& k) const {
  const auto si = sections_.find(s);
  if (si == sections_.end()) return nullptr;
  const auto ki = si->second.find(k);
  if (ki == si->second.end()) return nullptr;
  return &ki->second;
}

bool KvFile::has(const std::string& s, const std::string& k) const {
  return find(s, k) != nullptr;
}

double KvFile::num(const std::string& s, const std::string& k) const {
  const Value* v = find(s, k);
  if (!v || v->kind != 0)
    throw ConfigError("config: missing numeric key [" + s + "] " + k);
  return v->num;
}

double KvFile::num_or(const std::string& s, const std::string& k,
                      double fallback) const {
  const Value* v = find(s, k);
  if (!v) return fallback;
  if (v->kind != 0)
    throw ConfigError("config: key [" + s + "] " + k + " must be a number");
  return v->num;
}

std::string KvFile::str(const std::string& s, const std::string& k) const {
  const Value* v = find(s, k);
  if (!v || v->kind != 1)
    throw ConfigError("config: missing string key [" + s + "] " + k);
  return v->str;
}

std::string KvFile::str_or(const std::string& s, const std::string& k,
                           const std::string& fallback) const {
  const Value* v = find(s, k);
  if (!v) return fallback;
  if (v->kind != 1)
    throw ConfigError("config: key [" + s + "] " + k + " must be a string");
  return v->str;
}

bool KvFile::boolean_or(const std::string& s, const std::string& k,
                        bool fallback) const {
  const Value* v = find(s, k);
  if (!v) return fallback;
  if (v->kind != 2)
    throw ConfigError("config: key [" + s + "] " + k + " must be a boolean");
  return v->b;
}

std::vector<double> KvFile::nums_or(const std::string& s, const std::string& k,
                                    std::vector<double> fallback) const {
  const Value* v = find(s, k);
  if (!v) return fallback;
  if (v->kind != 3)
    throw ConfigError("config: key [" + s + "] " + k + " must be an array");
  return v->arr;
}

namespace {

std::string join_path(const std::string& base, const std::string& rel) {
  if (rel.empty() || rel.front() == '/') return rel;
  if (base.empty()) return rel;
  return base.back() == '/' ? base + rel : base + "/" + rel;
}

}  // namespace

RunConfig run_config_from_text(const std::string& text,
                               const std::string& base_dir) {
  const KvFile kv = KvFile::parse(text);
  RunConfig c;
  c.config_text = text;

  c.tntp_file = kv.str_or("network", "tntp_file", "");
  if (!c.tntp_file.empty()) c.tntp_file = join_path(base_dir, c.tntp_file);
  c.length_unit_scale = kv.num_or("network", "length_unit_scale", 1609.34);
  c.virtual_link_length = kv.num_or("network", "virtual_link_length", 1000.0);
  if (c.length_unit_scale <= 0.0)
    throw ConfigError("[network] length_unit_scale must be positive");
  if (c.virtual_link_length <= 0.0)
    throw ConfigError("[network] virtual_link_length must be positive");

  const double seed = kv.num_or("scenario", "seed", 1);
  if (seed < 0) throw ConfigError("[scenario] seed must be non-negative");
  c.seed = static_cast<std::uint64_t>(seed);
  c.vehicles = static_cast<int>(kv.num_or("scenario", "vehicles", 2000));
  c.platoon_size = static_cast<int>(kv.num_or("scenario", "platoon_size", 4));
  c.truth_platoon_size =
      static_cast<int>(kv.num_or("scenario", "truth_platoon_size", 1));
  c.horizon_min = kv.num_or("scenario", "horizon_min", 90.0);
  c.observe_window_min = kv.num_or("scenario", "observe_window_min", 30.0);
  if (c.vehicles <= 0) throw ConfigError("[scenario] vehicles must be positive");
  if (c.platoon_size < 1 || c.truth_platoon_size < 1)
    throw ConfigError("[scenario] platoon sizes must be >= 1");
  if (c.vehicles % c.platoon_size != 0 ||
      c.vehicles % c.truth_platoon_size != 0)
    throw ConfigError("[scenario] vehicles must be divisible by the platoon size");
  if (c.observe_window_min > c.horizon_min)
    throw ConfigError("[scenario] observe_window_min exceeds horizon_min");

  c.interval_s = static_cast<int>(kv.num_or("observation", "interval_s", 300));
  c.noise_frac = kv.num_or("observation", "noise_frac", 0.10);
  c.coverage = kv.num_or("observation", "coverage", 0.80);
  if (c.interval_s <= 0) throw ConfigError("[observation] interval_s must be positive");
  if (c.noise_frac < 0.0 || c.noise_frac >= 1.0)
    throw ConfigError("[observation] noise_frac must be in [0, 1)");
  if (c.coverage <= 0.0 || c.coverage > 1.0)
    throw ConfigError("[observation] coverage must be in (0, 1]");

  c.lr = kv.num_or("optimizer", "lr", 0.1);
  c.weight_decay = kv.num_or("optimizer", "weight_decay", 1e-5);
  c.patience = static_cast<int>(kv.num_or("optimizer", "patience", 20));
  c.max_iterations =
      static_cast<int>(kv.num_or("optimizer", "max_iterations", 200));
  const std::string nm = kv.str_or("optimizer", "noise_mode", "resample");
  if (nm != "resample" && nm != "frozen")
    throw ConfigError("[optimizer] noise_mode must be \"resample\" or \"frozen\"");
  c.resample_noise = nm == "resample";
  if (c.lr <= 0.0) throw ConfigError("[optimizer] lr must be positive");
  if (c.patience < 1) throw ConfigError("[optimizer] patience must be >= 1");
  if (c.max_iterations < 1)
    throw ConfigError("[optimizer] max_iterations must be >= 1");

  c.control_target_link =
      static_cast<int>(kv.num_or("control", "target_link", -1));
  c.control_reduction = kv.num_or("control", "reduction", 0.5);
  c.control_horizon_min = kv.num_or("control", "horizon_min", 60.0);
  c.cost_floor = kv.num_or("control", "cost_floor", 0.05);
  c.control_max_iterations =
      static_cast<int>(kv.num_or("control", "max_iterations", 120));
  if (c.control_reduction <= 0.0 || c.control_reduction > 1.0)
    throw ConfigError("[control] reduction must be in (0, 1]");
  if (c.cost_floor <= 0.0)
    throw ConfigError("[control] cost_floor must be positive");

  c.nowcast_horizons_min =
      kv.nums_or("nowcast", "horizons_min", {5, 10, 30, 60});
  for (double h : c.nowcast_horizons_min)
    if (h <= 0) throw ConfigError("[nowcast] horizons must be positive");

  c.gradcheck_draws = static_cast<int>(kv.num_or("gradcheck", "draws", 20));
  c.gradcheck_steps = static_cast<int>(kv.num_or("gradcheck", "steps", 20));
  c.gradcheck_agents = static_cast<int>(kv.num_or("gradcheck", "agents", 5));
  c.gradcheck_tolerance = kv.num_or("gradcheck", "tolerance", 1e-4);

  c.out_dir = join_path(base_dir, kv.str_or("run", "out_dir", "runs/out"));
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string base;
  const auto slash = path.find_last_of('/');
  if (slash != std::string::npos) base = path.substr(0, slash);
  return run_config_from_text(ss.str(), base);
}

std::uint64_t fnv1a64(const std::string& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : data) h = (h ^ ch) * 0x100000001b3ULL;
  return h;
}

}  // namespace dtsim
