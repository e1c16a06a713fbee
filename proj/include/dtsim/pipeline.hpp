#pragma once

#include <string>
#include <vector>

#include "dtsim/config.hpp"
#include "dtsim/engine.hpp"
#include "dtsim/network.hpp"
#include "dtsim/observation.hpp"
#include "dtsim/optimization.hpp"

namespace dtsim {

constexpr const char* kVersion = "1.0.0";

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

std::string series_to_csv(const CountSeries& s);
CountSeries series_from_csv(const std::string& text);

/// Parse the TNTP file and attach virtual links, all seeded from the
/// config's root seed so every command rebuilds the identical network.
Network build_network(const RunConfig& c);

Scenario build_scenario(const RunConfig& c, const Network& net, int platoon,
                        double horizon_min);

// Command bodies used by the C API and the CLI. They write their outputs
// under c.out_dir and throw ConfigError / DivergenceError on failure.
void cmd_synthesize(const RunConfig& c);
void cmd_calibrate(const RunConfig& c, const std::string& init_params = "");
void cmd_nowcast(const RunConfig& c, const std::string& params_path = "");
void cmd_control(const RunConfig& c, const std::string& params_path = "");
void cmd_tg_demo(const std::string& out_dir);
void cmd_gradcheck(const RunConfig& c);

struct TgDemoResult {
  double u1_with = 0.0, u2_with = 0.0;
  double u1_without = 0.0, u2_without = 0.0;
  double final_loss_with = 0.0, final_loss_without = 0.0;
  int iterations = 0;
};

/// Two-link grafting demonstration: gradient descent on both link speeds
/// from a single position observation, with grafting on and off.
TgDemoResult run_tg_demo(std::vector<std::string>* loss_csv = nullptr);

struct GradcheckReport {
  double max_rel_err = 0.0;
  int draws = 0;
  int redraws = 0;
  bool pass = false;
  std::vector<double> per_draw_max;
};

/// Finite-difference validation of the end-to-end gradient on a chain
/// scenario with relaxed choices and frozen noise. Draws with a branch
/// flip inside the probe stencil are redrawn.
GradcheckReport run_gradcheck(int draws, int steps, int agents, double tol,
                              std::uint64_t seed);

}  // namespace dtsim
