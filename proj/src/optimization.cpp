#include "dtsim/optimization.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace dtsim {

void AdamW::step(std::vector<double>& params,
                 const std::vector<double>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw std::runtime_error("AdamW: size mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    params[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                            cfg_.weight_decay * params[i]);
  }
}

double BoundedTransform::value(double raw) const {
  const double s = raw >= 0.0 ? 1.0 / (1.0 + std::exp(-raw))
                              : std::exp(raw) / (1.0 + std::exp(raw));
  return lo_ + (hi_ - lo_) * s;
}

double BoundedTransform::dvalue(double raw) const {
  const double s = raw >= 0.0 ? 1.0 / (1.0 + std::exp(-raw))
                              : std::exp(raw) / (1.0 + std::exp(raw));
  return (hi_ - lo_) * s * (1.0 - s);
}

double BoundedTransform::raw_of(double value) const {
  if (hi_ == lo_) return 0.0;
  double f = (value - lo_) / (hi_ - lo_);
  f = std::clamp(f, 1e-9, 1.0 - 1e-9);
  return std::log(f / (1.0 - f));
}

double LowerBoundTransform::value(double raw) const {
  const double sp = raw > 30.0 ? raw : std::log1p(std::exp(raw));
  return floor_ + sp;
}

double LowerBoundTransform::dvalue(double raw) const {
  return raw >= 0.0 ? 1.0 / (1.0 + std::exp(-raw))
                    : std::exp(raw) / (1.0 + std::exp(raw));
}

double LowerBoundTransform::raw_of(double value) const {
  const double y = std::max(value - floor_, 1e-12);
  return y > 30.0 ? y : std::log(std::expm1(y));
}

double mse_loss_value(const CountSeries& sim, const CountSeries& obs) {
  if (obs.link_ids.empty())
    throw std::runtime_error("loss: no observed links");
  if (sim.n_intervals() < obs.n_intervals())
    throw std::runtime_error("loss: simulated series has fewer intervals");
  double total = 0.0;
  for (std::size_t q = 0; q < obs.link_ids.size(); ++q) {
    // locate the observed link in the simulated series
    const auto it = std::find(sim.link_ids.begin(), sim.link_ids.end(),
                              obs.link_ids[q]);
    if (it == sim.link_ids.end())
      throw std::runtime_error("loss: observed link missing from simulation");
    const std::size_t p = it - sim.link_ids.begin();
    double link_mse = 0.0;
    for (int k = 0; k < obs.n_intervals(); ++k) {
      const double d = sim.values[k][p] - obs.values[k][q];
      link_mse += d * d;
    }
    total += link_mse / obs.n_intervals();
  }
  return total / obs.link_ids.size();
}

LossBuilder mse_loss_builder(const CountSeries& obs, int delta_n) {
  if (obs.link_ids.empty())
    throw std::runtime_error("loss: no observed links");
  return [obs, delta_n](Tape&, const LossInputs& li) -> Tensor {
    const int K = obs.n_intervals();
    if (static_cast<int>(li.snapshots.size()) < K)
      throw std::runtime_error("loss: fewer snapshots than observations");
    Tensor acc = Tensor::zeros({1, 1});
    for (int k = 0; k < K; ++k) {
      Tensor yhat = scale(gather(li.snapshots[k], obs.link_ids),
                          static_cast<double>(delta_n));
      Tensor d = sub(yhat, Tensor::from(obs.values[k],
                                        {static_cast<int>(obs.link_ids.size()), 1}));
      acc = add(acc, reduce_sum(mul(d, d), kAxisAll));
    }
    return scale(acc, 1.0 / (static_cast<double>(K) * obs.link_ids.size()));
  };
}

namespace {

bool finite(double x) { return std::isfinite(x); }

std::string nan_block(const LinkParams& g) {
  auto bad = [](const std::vector<double>& v) {
    return std::any_of(v.begin(), v.end(),
                       [](double x) { return !std::isfinite(x); });
  };
  if (bad(g.u)) return "u";
  if (bad(g.kappa)) return "kappa";
  if (bad(g.beta)) return "beta";
  if (bad(g.alpha)) return "alpha";
  if (bad(g.cost)) return "cost";
  return "loss";
}

}  // namespace

CalibrationResult calibrate(const Scenario& s, const CountSeries& obs,
                            const ParamRanges& bounds,
                            const OptimizeConfig& cfg, const RngStream& rng,
                            const LinkParams* init) {
  const auto t0 = std::chrono::steady_clock::now();
  const int L = s.net.n_links();
  const BoundedTransform tu(bounds.u_lo, bounds.u_hi);
  const BoundedTransform tk(bounds.kappa_lo, bounds.kappa_hi);
  const BoundedTransform tb(bounds.beta_lo, bounds.beta_hi);
  const BoundedTransform ta(bounds.alpha_lo, bounds.alpha_hi);

  // raw layout: [u | kappa | beta | alpha]
  std::vector<double> raw(4 * L, 0.0);
  if (init) {
    for (int l = 0; l < L; ++l) {
      raw[l] = tu.raw_of(init->u[l]);
      raw[L + l] = tk.raw_of(init->kappa[l]);
      raw[2 * L + l] = tb.raw_of(init->beta[l]);
      raw[3 * L + l] = ta.raw_of(init->alpha[l]);
    }
  }
  std::vector<double> fixed_cost =
      init && !init->cost.empty() ? init->cost : std::vector<double>(L, 1.0);

  auto realize = [&](const std::vector<double>& r) {
    LinkParams p;
    p.u.resize(L);
    p.kappa.resize(L);
    p.beta.resize(L);
    p.alpha.resize(L);
    p.cost = fixed_cost;
    for (int l = 0; l < L; ++l) {
      p.u[l] = tu.value(r[l]);
      p.kappa[l] = tk.value(r[L + l]);
      p.beta[l] = tb.value(r[2 * L + l]);
      p.alpha[l] = ta.value(r[3 * L + l]);
    }
    return p;
  };

  const LossBuilder builder = mse_loss_builder(obs, s.cfg.delta_n);
  AdamW adam(4 * L, cfg.adam);

  CalibrationResult res;
  res.best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;
  const int draws = cfg.resample_noise ? std::max(1, cfg.noise_draws) : 1;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    const LinkParams params = realize(raw);
    double loss = 0.0;
    LinkParams grads;
    for (int k = 0; k < draws; ++k) {
      ForwardOptions opt;
      opt.noise_iteration = cfg.resample_noise
                                ? static_cast<std::uint64_t>(it * draws + k + 1)
                                : 0;
      const GradResult g =
          simulate_gradient(s, params, rng, builder, cfg.grad_mode, opt);
      loss += g.loss / draws;
      if (k == 0) {
        grads = g.grads;
      } else {
        for (int l = 0; l < L; ++l) {
          grads.u[l] += g.grads.u[l];
          grads.kappa[l] += g.grads.kappa[l];
          grads.beta[l] += g.grads.beta[l];
          grads.alpha[l] += g.grads.alpha[l];
        }
      }
    }
    res.loss_curve.push_back(loss);
    res.iterations = it + 1;
    if (!finite(loss))
      throw DivergenceError("calibration diverged at iteration " +
                            std::to_string(it) + " (non-finite " +
                            nan_block(grads) + ")");
    if (loss < res.best_loss) {
      res.best_loss = loss;
      res.best_params = params;
      res.best_iteration = it;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
    std::vector<double> rg(4 * L);
    for (int l = 0; l < L; ++l) {
      rg[l] = grads.u[l] / draws * tu.dvalue(raw[l]);
      rg[L + l] = grads.kappa[l] / draws * tk.dvalue(raw[L + l]);
      rg[2 * L + l] = grads.beta[l] / draws * tb.dvalue(raw[2 * L + l]);
      rg[3 * L + l] = grads.alpha[l] / draws * ta.dvalue(raw[3 * L + l]);
    }
    adam.step(raw, rg);
  }
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return res;
}

ControlResult optimize_control(const Scenario& s, const LinkParams& calibrated,
                               int target_link, double desired_count,
                               const ControlConfig& cfg, const RngStream& rng) {
  const auto t0 = std::chrono::steady_clock::now();
  const int L = s.net.n_links();
  if (target_link < 0 || target_link >= L)
    throw std::runtime_error("control: target link out of range");
  const LowerBoundTransform tc(cfg.cost_floor);

  std::vector<double> raw(L);
  for (int l = 0; l < L; ++l) raw[l] = tc.raw_of(calibrated.cost[l]);

  const int dn = s.cfg.delta_n;
  const LossBuilder builder = [target_link, desired_count,
                               dn](Tape&, const LossInputs& li) -> Tensor {
    Tensor c = scale(gather(li.cum_final, {target_link}),
                     static_cast<double>(dn));
    Tensor d = add_scalar(c, -desired_count);
    return mul(d, d);
  };

  AdamW adam(L, cfg.opt.adam);
  ControlResult res;
  res.desired = desired_count;
  res.best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;
  bool any_nonzero_grad = false;
  const int draws = cfg.opt.resample_noise ? std::max(1, cfg.opt.noise_draws) : 1;
  for (int it = 0; it < cfg.opt.max_iterations; ++it) {
    LinkParams params = calibrated;
    for (int l = 0; l < L; ++l) params.cost[l] = tc.value(raw[l]);
    double loss = 0.0, achieved = 0.0;
    std::vector<double> cg(L, 0.0);
    for (int k = 0; k < draws; ++k) {
      ForwardOptions opt;
      opt.noise_iteration =
          cfg.opt.resample_noise
              ? static_cast<std::uint64_t>(it * draws + k + 1)
              : 0;
      const GradResult g = simulate_gradient(s, params, rng, builder,
                                             cfg.opt.grad_mode, opt);
      loss += g.loss / draws;
      achieved += g.cum_final_values[target_link] * dn / draws;
      for (int l = 0; l < L; ++l) cg[l] += g.grads.cost[l] / draws;
    }
    res.loss_curve.push_back(loss);
    res.iterations = it + 1;
    if (!finite(loss))
      throw DivergenceError("control diverged at iteration " +
                            std::to_string(it));
    if (loss < res.best_loss) {
      res.best_loss = loss;
      res.cost = params.cost;
      res.achieved = achieved;
      since_best = 0;
    } else if (++since_best >= cfg.opt.patience) {
      break;
    }
    std::vector<double> rg(L);
    for (int l = 0; l < L; ++l) {
      rg[l] = cg[l] * tc.dvalue(raw[l]);
      if (rg[l] != 0.0) any_nonzero_grad = true;
    }
    adam.step(raw, rg);
  }
  res.zero_gradient_stall = !any_nonzero_grad;
  res.gap_fraction = desired_count != 0.0
                         ? std::abs(res.achieved - desired_count) /
                               std::abs(desired_count)
                         : std::abs(res.achieved - desired_count);
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return res;
}

Metrics count_metrics(const CountSeries& sim, const CountSeries& truth) {
  Metrics m;
  std::vector<double> a, b;
  for (std::size_t q = 0; q < truth.link_ids.size(); ++q) {
    const auto it = std::find(sim.link_ids.begin(), sim.link_ids.end(),
                              truth.link_ids[q]);
    if (it == sim.link_ids.end()) continue;
    const std::size_t p = it - sim.link_ids.begin();
    const int K = std::min(sim.n_intervals(), truth.n_intervals());
    for (int k = 0; k < K; ++k) {
      const double sa = sim.values[k][p] - (k > 0 ? sim.values[k - 1][p] : 0.0);
      const double sb =
          truth.values[k][q] - (k > 0 ? truth.values[k - 1][q] : 0.0);
      a.push_back(sa);
      b.push_back(sb);
    }
  }
  m.n_pairs = static_cast<int>(a.size());
  if (a.empty()) return m;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m.mae += std::abs(a[i] - b[i]);
    ma += a[i];
    mb += b[i];
  }
  m.mae /= a.size();
  ma /= a.size();
  mb /= b.size();
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa > 0.0 && sbb > 0.0) {
    m.pearson_r = sab / std::sqrt(saa * sbb);
    m.r_defined = true;
  }
  return m;
}

}  // namespace dtsim
