#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtsim {

/// Raised on malformed or inconsistent run configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Minimal sectioned key-value file: [section], key = value, # comments.
/// Values: numbers, "strings", true/false, [n1, n2, ...].
class KvFile {
 public:
  static KvFile parse(const std::string& text);
  static KvFile parse_file(const std::string& path);

  bool has(const std::string& section, const std::string& key) const;
  double num(const std::string& section, const std::string& key) const;
  double num_or(const std::string& section, const std::string& key,
                double fallback) const;
  std::string str(const std::string& section, const std::string& key) const;
  std::string str_or(const std::string& section, const std::string& key,
                     const std::string& fallback) const;
  bool boolean_or(const std::string& section, const std::string& key,
                  bool fallback) const;
  std::vector<double> nums_or(const std::string& section,
                              const std::string& key,
                              std::vector<double> fallback) const;

  const std::string& raw_text() const { return raw_; }

 private:
  struct Value {
    int kind = 0;  // 0 num, 1 str, 2 bool, 3 array
    double num = 0.0;
    std::string str;
    bool b = false;
    std::vector<double> arr;
  };
  const Value* find(const std::string& s, const std::string& k) const;
  std::map<std::string, std::map<std::string, Value>> sections_;
  std::string raw_;
};

struct RunConfig {
  // network
  std::string tntp_file;
  double length_unit_scale = 1609.34;
  double virtual_link_length = 1000.0;

  // scenario
  std::uint64_t seed = 1;
  int vehicles = 2000;
  int platoon_size = 4;
  int truth_platoon_size = 1;
  double horizon_min = 90.0;
  double observe_window_min = 30.0;

  // observation
  int interval_s = 300;
  double noise_frac = 0.10;
  double coverage = 0.80;

  // optimizer
  double lr = 0.1;
  double weight_decay = 1e-5;
  int patience = 20;
  int max_iterations = 200;
  bool resample_noise = true;

  // control
  int control_target_link = -1;  // -1: pick the busiest physical link
  double control_reduction = 0.5;
  double control_horizon_min = 60.0;
  double cost_floor = 0.05;
  int control_max_iterations = 120;

  // nowcast
  std::vector<double> nowcast_horizons_min = {5, 10, 30, 60};

  // gradcheck
  int gradcheck_draws = 20;
  int gradcheck_steps = 20;
  int gradcheck_agents = 5;
  double gradcheck_tolerance = 1e-4;

  // run
  std::string out_dir = "runs/out";

  std::string config_text;  // raw file contents (hashed into manifests)
};

/// Parse and validate a config file. Relative paths resolve against the
/// directory containing the file. Field-level problems raise ConfigError.
RunConfig load_run_config(const std::string& path);
RunConfig run_config_from_text(const std::string& text,
                               const std::string& base_dir);

std::uint64_t fnv1a64(const std::string& data);

}  // namespace dtsim
