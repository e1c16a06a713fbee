#pragma once

#include <vector>

#include "dtsim/branch_trace.hpp"
#include "dtsim/tensor.hpp"

namespace dtsim {

/// An agent occupies a link when its entry is at or above this threshold;
/// anything below is the "not on this link" sentinel region.
constexpr double kValidThreshold = -1e-2;
/// An agent counts as having reached the link end within this tolerance.
constexpr double kArrivalTol = 1e-2;
/// Internal large value for sort auxiliaries and utility masking.
constexpr double kMaskLarge = 1e12;

/// Recorded discontinuity data from a base forward run. During a replay,
/// grafted values, gradient carriers and min/max branch picks are frozen at
/// their recorded base values, which turns the forward map into the smooth
/// local surrogate whose exact derivative the reverse sweep computes. That
/// is what finite-difference probes must evaluate.
struct SurrogateTrace {
  std::vector<std::vector<double>> graft_new, graft_old, carriers;
  std::vector<std::vector<std::uint8_t>> picks;
  std::size_t gi = 0, ci = 0, pi = 0;
  bool replay = false;
  void rewind() { gi = ci = pi = 0; }
};

struct SimConfig {
  int delta_n = 1;            // vehicles per agent (platoon size)
  double tau = 1.0;           // reaction time, s
  double sentinel = 99999.0;  // M: "not on this link" marker
  double gumbel_tau = 0.01;   // choice relaxation temperature
  bool trajectory_grafting = true;
  bool soft_choices = false;  // relaxed surrogate: keep soft choice tensors
  SurrogateTrace* surrogate = nullptr;
  double dt() const { return tau * delta_n; }
};

/// Graft with optional surrogate recording/replay (see SurrogateTrace).
Tensor traced_graft(const Tensor& v_new, const Tensor& v_old,
                    const SimConfig& cfg);
/// v - stop_gradient(v): exact zero forward, unit gradient carrier.
Tensor traced_carrier(const Tensor& v, const SimConfig& cfg);
/// Elementwise min / max-against-zero with branch picks frozen in replay.
Tensor traced_min(const Tensor& a, const Tensor& b, const SimConfig& cfg);
Tensor traced_relu(const Tensor& a, const SimConfig& cfg);

/// Space headway for one link column: distance to the nearest valid agent
/// ahead. The leading valid agent and all invalid agents receive the
/// sentinel. Gradients flow through the sorted differences.
Tensor headways(const Tensor& x_col, double sentinel, BranchTrace* bt = nullptr);

/// One Newell position update for one link column. u_j and kappa_j are
/// 1x1 tensors so per-link parameter gradients survive the update.
Tensor car_following_step(const Tensor& x_col, const Tensor& u_j,
                          const Tensor& kappa_j, double link_length,
                          const SimConfig& cfg, BranchTrace* bt = nullptr);

/// f: the per-link update applied independently to every column of X.
Tensor position_update_all(const Tensor& X, const Tensor& u,
                           const Tensor& kappa,
                           const std::vector<double>& lengths,
                           const SimConfig& cfg, BranchTrace* bt = nullptr);

}  // namespace dtsim
