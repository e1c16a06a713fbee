#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "dtsim/engine.hpp"
#include "dtsim/network.hpp"
#include "dtsim/observation.hpp"

namespace dtsim {

/// Raised when an optimization run produces a non-finite loss.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AdamWConfig {
  double lr = 0.1;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW with decoupled weight decay on the raw parameters.
class AdamW {
 public:
  AdamW(int n, const AdamWConfig& cfg)
      : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}
  void step(std::vector<double>& params, const std::vector<double>& grads);
  int iterations() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<double> m_, v_;
  int t_ = 0;
};

/// Smooth reparameterization onto an open interval (lo, hi):
/// value = lo + (hi - lo) * sigmoid(raw). raw = 0 lands on the midpoint.
class BoundedTransform {
 public:
  BoundedTransform(double lo, double hi) : lo_(lo), hi_(hi) {}
  double value(double raw) const;
  double dvalue(double raw) const;
  double raw_of(double value) const;

 private:
  double lo_, hi_;
};

/// value = floor + softplus(raw); keeps costs above a positive floor.
class LowerBoundTransform {
 public:
  explicit LowerBoundTransform(double floor) : floor_(floor) {}
  double value(double raw) const;
  double dvalue(double raw) const;
  double raw_of(double value) const;

 private:
  double floor_;
};

/// Mean squared error over observed links: squared errors averaged over
/// intervals per link, then averaged over links. Throws on an empty mask.
double mse_loss_value(const CountSeries& sim, const CountSeries& obs);

/// Tape-side version of the same loss over engine snapshots.
LossBuilder mse_loss_builder(const CountSeries& obs, int delta_n);

struct OptimizeConfig {
  AdamWConfig adam;
  int patience = 20;
  int max_iterations = 200;
  bool resample_noise = true;
  /// Fresh noise draws averaged per iteration. One draw reproduces the
  /// plain stochastic loop; more draws tighten the gradient estimate for
  /// objectives without cross-link averaging (single-link control).
  int noise_draws = 1;
  GradMode grad_mode = GradMode::Checkpointed;
};

struct CalibrationResult {
  LinkParams best_params;
  double best_loss = 0.0;
  int best_iteration = -1;
  int iterations = 0;
  std::vector<double> loss_curve;
  double wall_seconds = 0.0;
};

/// Gradient-based fit of the behavioral parameters (u, kappa, beta, alpha)
/// to observed counts. Costs stay fixed. Starts from the range midpoints
/// unless `init` is given. Returns the best-loss parameters seen.
CalibrationResult calibrate(const Scenario& s, const CountSeries& obs,
                            const ParamRanges& bounds,
                            const OptimizeConfig& cfg, const RngStream& rng,
                            const LinkParams* init = nullptr);

struct ControlConfig {
  OptimizeConfig opt;
  double cost_floor = 0.05;
};

struct ControlResult {
  std::vector<double> cost;
  double desired = 0.0;
  double achieved = 0.0;
  double gap_fraction = 0.0;
  double best_loss = 0.0;
  int iterations = 0;
  std::vector<double> loss_curve;
  bool zero_gradient_stall = false;
  double wall_seconds = 0.0;
};

/// Road-pricing optimization: adjusts per-link costs so the cumulative
/// count on `target_link` at the horizon approaches `desired_count`
/// (vehicle units). Behavioral parameters stay fixed at `calibrated`.
ControlResult optimize_control(const Scenario& s, const LinkParams& calibrated,
                               int target_link, double desired_count,
                               const ControlConfig& cfg, const RngStream& rng);

struct Metrics {
  double mae = 0.0;
  double pearson_r = 0.0;
  bool r_defined = false;
  int n_pairs = 0;
};

/// MAE and Pearson correlation over per-interval count increments, paired
/// on the links common to both series.
Metrics count_metrics(const CountSeries& sim, const CountSeries& truth);

}  // namespace dtsim
