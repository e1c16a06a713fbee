#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dtsim/car_following.hpp"
#include "dtsim/network.hpp"
#include "dtsim/node_model.hpp"
#include "dtsim/observation.hpp"
#include "dtsim/rng.hpp"
#include "dtsim/tensor.hpp"

namespace dtsim {

struct Scenario {
  Network net;
  SimConfig cfg;
  int n_vehicles = 0;
  int horizon_steps = 0;
  int obs_interval_s = 300;
  /// Nominal jam density used only for the initial queue layout, so the
  /// initial state does not depend on the unknown parameters.
  double seeding_kappa = 0.2;
  /// Optional explicit placement (one entry per agent) overriding the
  /// round-robin inflow seeding; used by demos and tests.
  struct Placement {
    int link = 0;
    double pos = 0.0;
  };
  std::vector<Placement> custom_init;

  int n_agents() const;
};

/// horizon in whole steps; throws when minutes * 60 is not a multiple of dt.
int steps_for_minutes(const SimConfig& cfg, double minutes);

struct InitialState {
  std::vector<int> link;
  std::vector<double> pos;
};

/// Round-robin distribution of agents over the virtual inflow links,
/// queued from each link end backward at the nominal jam spacing. Throws
/// when a queue does not fit its link, naming the required length.
InitialState seed_agents(const Scenario& s);

/// Lengthen virtual inflow links so every seeded queue fits.
void fit_inflow_queues(Scenario& s);

Tensor initial_state_tensor(const InitialState& init, int n_links,
                            double sentinel);

struct ForwardOptions {
  bool record_states = false;
  std::uint64_t noise_iteration = 0;
  bool trace_branches = false;
};

struct Trajectory {
  int steps = 0;
  std::vector<std::vector<double>> cum_per_step;  // agent units, per link
  std::vector<std::vector<double>> states;        // dense X per step (optional)
  std::vector<double> X_final;                    // dense final state
  std::vector<double> cum_final;
  double wall_seconds = 0.0;
  std::uint64_t branch_hash = 0;

  CountSeries series(const std::vector<int>& link_ids, int interval_s,
                     double dt, int delta_n) const {
    return series_from_levels(cum_per_step, link_ids, interval_s, dt, delta_n);
  }
};

Trajectory simulate_forward(const Scenario& s, const LinkParams& params,
                            const RngStream& rng,
                            const ForwardOptions& opt = {});

/// Tensors handed to a loss builder. Snapshots are the cumulative count
/// vectors (agent units, |L| x 1) at each observation-interval boundary.
struct LossInputs {
  std::vector<Tensor> snapshots;
  Tensor X_final;
  Tensor cum_final;
};
using LossBuilder = std::function<Tensor(Tape&, const LossInputs&)>;

enum class GradMode { FullTape, Checkpointed };

struct GradResult {
  double loss = 0.0;
  LinkParams grads;  // dLoss/dparam, same layout as LinkParams
  std::vector<std::vector<double>> snapshot_values;
  std::vector<double> cum_final_values;
  std::vector<double> X_final_values;
  double wall_seconds = 0.0;
  std::uint64_t branch_hash = 0;
};

/// Differentiable run: forward simulation, loss over the recorded
/// snapshots/final state, reverse sweep for all five per-link parameter
/// vectors. Checkpointed mode stores one compact state per step and
/// replays each step segment during the backward pass.
GradResult simulate_gradient(const Scenario& s, const LinkParams& params,
                             const RngStream& rng, const LossBuilder& builder,
                             GradMode mode, const ForwardOptions& opt = {});

}  // namespace dtsim
