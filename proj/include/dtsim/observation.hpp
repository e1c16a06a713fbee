#pragma once

#include <utility>
#include <vector>

#include "dtsim/branch_trace.hpp"
#include "dtsim/car_following.hpp"
#include "dtsim/network.hpp"
#include "dtsim/rng.hpp"
#include "dtsim/tensor.hpp"

namespace dtsim {

/// Cumulative vehicle counts per link at fixed interval boundaries.
/// values[k][p] is the cumulative count of link link_ids[p] at time
/// (k + 1) * interval_s.
struct CountSeries {
  std::vector<int> link_ids;
  int interval_s = 300;
  std::vector<std::vector<double>> values;

  int n_intervals() const { return static_cast<int>(values.size()); }
};

/// Exact-but-differentiable count of agents past the counter at o_j on one
/// link column. The forward value is the integer count; the backward pass
/// uses a sigmoid of slope 5/L_j.
Tensor midpoint_count(const Tensor& x_col, double o_j, double link_length,
                      BranchTrace* bt = nullptr);
Tensor midpoint_count(const Tensor& x_col, double o_j, double link_length,
                      const SimConfig& cfg, BranchTrace* bt = nullptr);

/// Cumulative series from per-step per-link count levels (agent units):
/// per link, the running sum of positive level increments, scaled to
/// vehicles and sampled every `interval_s`.
CountSeries series_from_levels(const std::vector<std::vector<double>>& cum_per_step,
                               const std::vector<int>& link_ids, int interval_s,
                               double dt, int delta_n);

/// Multiplicative uniform noise and a seeded coverage subset of the given
/// link ids. Returns the noisy series (restricted to observed links) and
/// the sorted observed link ids.
std::pair<CountSeries, std::vector<int>> synthesize_observations(
    const CountSeries& truth, double noise_frac, double coverage,
    const RngStream& rng);

}  // namespace dtsim
