#include "dtsim/optimization.hpp"

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"

using namespace dtsim;

namespace {

constexpr double kM = 99999.0;

Network chain_net() {
  std::vector<Link> links(4);
  links[0] = {0, 3, 0, 300.0, LinkKind::VirtualInflow};
  links[1] = {1, 0, 1, 200.0, LinkKind::Physical};
  links[2] = {2, 1, 2, 200.0, LinkKind::Physical};
  links[3] = {3, 2, 4, 300.0, LinkKind::VirtualOutflow};
  return make_network(5, links);
}

/// Scalar reference of the AdamW recurrence, kept independent of the
/// production implementation.
struct RefAdamW {
  double lr, wd, b1, b2, eps;
  std::vector<double> m, v;
  int t = 0;
  void step(std::vector<double>& p, const std::vector<double>& g) {
    ++t;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mhat = m[i] / (1 - std::pow(b1, t));
      const double vhat = v[i] / (1 - std::pow(b2, t));
      p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
    }
  }
};

}  // namespace

TEST_CASE("mse loss over observed links") {
  CountSeries sim;
  sim.link_ids = {0, 1, 2};
  sim.interval_s = 300;
  sim.values = {{10, 4, 7}};

  CountSeries obs = sim;
  CHECK(mse_loss_value(sim, obs) == 0.0);

  obs.link_ids = {0};
  obs.values = {{13}};
  CHECK(mse_loss_value(sim, obs) == doctest::Approx(9.0));

  // per-link interval means of 4 and 16 average to 10
  CountSeries sim2;
  sim2.link_ids = {0, 1};
  sim2.interval_s = 300;
  sim2.values = {{2, 0}, {0, 0}};
  CountSeries obs2;
  obs2.link_ids = {0, 1};
  obs2.interval_s = 300;
  obs2.values = {{0, 4}, {2, 4}};
  // link 0: (4 + 4)/2 = 4, link 1: (16 + 16)/2 = 16
  CHECK(mse_loss_value(sim2, obs2) == doctest::Approx(10.0));

  CountSeries empty;
  empty.interval_s = 300;
  CHECK_THROWS(mse_loss_value(sim, empty));
}

TEST_CASE("adamw matches its reference recurrence") {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 1e-5;

  // zero gradient: pure decoupled decay
  {
    AdamW opt(1, cfg);
    std::vector<double> p = {2.0};
    opt.step(p, {0.0});
    CHECK(p[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 1e-5)).epsilon(1e-15));
  }
  // unit gradient on a fresh state: bias-corrected step of about -lr
  {
    AdamW opt(1, cfg);
    std::vector<double> p = {1.0};
    opt.step(p, {1.0});
    const double expected =
        1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * 1e-5 * 1.0;
    CHECK(p[0] == doctest::Approx(expected).epsilon(1e-14));
  }
  // identical coordinates stay identical
  {
    AdamW opt(2, cfg);
    std::vector<double> p = {0.7, 0.7};
    for (int t = 0; t < 5; ++t) {
      opt.step(p, {0.3, 0.3});
      CHECK(p[0] == p[1]);
    }
  }
  // random 10-element problems against the scalar reference
  for (int trial = 0; trial < 5; ++trial) {
    AdamW opt(10, cfg);
    RefAdamW ref{cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps,
                 std::vector<double>(10, 0.0), std::vector<double>(10, 0.0)};
    std::vector<double> p(10), q(10);
    for (int i = 0; i < 10; ++i)
      p[i] = q[i] = dtsim_test::trand(600 + trial, i, -2, 2);
    for (int t = 0; t < 20; ++t) {
      std::vector<double> g(10);
      for (int i = 0; i < 10; ++i)
        g[i] = dtsim_test::trand(700 + trial, 100 * t + i, -1, 1);
      opt.step(p, g);
      ref.step(q, g);
      for (int i = 0; i < 10; ++i)
        CHECK(std::abs(p[i] - q[i]) <= 1e-12);
    }
  }
}

TEST_CASE("constraint transforms") {
  const BoundedTransform tu(13.9, 22.2);
  CHECK(tu.value(0.0) == doctest::Approx(18.05));
  for (int i = 0; i < 50; ++i) {
    // strict interior below the sigmoid saturation range
    const double raw = dtsim_test::trand(55, i, -30, 30);
    const double v = tu.value(raw);
    CHECK(v > 13.9);
    CHECK(v < 22.2);
    CHECK(tu.dvalue(raw) >= 0.0);
  }
  // far outside, values saturate onto the bounds but never leave them
  for (const double raw : {-500.0, 500.0}) {
    CHECK(tu.value(raw) >= 13.9);
    CHECK(tu.value(raw) <= 22.2);
  }
  CHECK(tu.value(tu.raw_of(17.0)) == doctest::Approx(17.0).epsilon(1e-9));

  const LowerBoundTransform tc(0.05);
  CHECK(tc.value(tc.raw_of(1.0)) == doctest::Approx(1.0).epsilon(1e-9));
  for (int i = 0; i < 50; ++i) {
    const double raw = dtsim_test::trand(56, i, -30, 30);
    CHECK(tc.value(raw) >= 0.05);
    CHECK(tc.dvalue(raw) > 0.0);
  }
}

TEST_CASE("metrics over count increments") {
  CountSeries a, b;
  a.link_ids = b.link_ids = {0, 1};
  a.interval_s = b.interval_s = 300;
  a.values = {{1, 2}, {3, 5}};
  b.values = a.values;
  Metrics m = count_metrics(a, b);
  CHECK(m.mae == 0.0);
  CHECK(m.r_defined);
  CHECK(m.pearson_r == doctest::Approx(1.0));
  CHECK(m.n_pairs == 4);

  // constant offset on the cumulative level keeps r = 1 on the first
  // increment and shifts MAE accordingly
  CountSeries c = a;
  for (auto& row : c.values)
    for (auto& v : row) v += 5;
  m = count_metrics(c, a);
  // increments: first interval differs by 5, later ones are unchanged
  CHECK(m.mae == doctest::Approx(2.5));
  CHECK(m.r_defined);

  // anti-correlated increments
  CountSeries d, e;
  d.link_ids = e.link_ids = {0};
  d.interval_s = e.interval_s = 300;
  d.values = {{1}, {4}, {5}};  // increments 1, 3, 1
  e.values = {{3}, {4}, {7}};  // increments 3, 1, 3
  m = count_metrics(d, e);
  CHECK(m.pearson_r == doctest::Approx(-1.0));

  // a constant series has no defined correlation
  CountSeries f = d, g = d;
  g.values = {{2}, {4}, {6}};
  f.values = {{1}, {2}, {3}};
  m = count_metrics(f, g);
  CHECK_FALSE(m.r_defined);
}

TEST_CASE("calibration self-consistency at the midpoint start") {
  const Network net = chain_net();
  Scenario s;
  s.net = net;
  s.cfg.delta_n = 1;
  s.n_vehicles = 6;
  s.obs_interval_s = 20;
  s.horizon_steps = 60;

  const ParamRanges ranges;
  const LinkParams mid = sample_parameters(net, ranges, RngStream(1), true);
  const Trajectory tr = simulate_forward(s, mid, RngStream(77));
  const auto phys = net.links_of_kind(LinkKind::Physical);
  const CountSeries obs = tr.series(phys, 20, 1.0, 1);

  OptimizeConfig cfg;
  cfg.patience = 5;
  cfg.max_iterations = 40;
  cfg.resample_noise = false;  // frozen noise reproduces the observation run
  const CalibrationResult r = calibrate(s, obs, ranges, cfg, RngStream(77));
  CHECK(r.best_loss == 0.0);  // the very first iterate already matches
  CHECK(r.best_iteration == 0);
  CHECK(r.iterations <= cfg.patience + 1);
  CHECK(r.best_params.u == mid.u);
}

TEST_CASE("gradient step decreases the relaxed surrogate loss") {
  const Network net = chain_net();
  Scenario s;
  s.net = net;
  s.cfg.delta_n = 1;
  s.cfg.soft_choices = true;
  s.n_vehicles = 5;
  s.obs_interval_s = 20;
  s.horizon_steps = 40;

  // target: counts produced by a different parameter draw
  const ParamRanges ranges;
  const LinkParams truth = sample_parameters(net, ranges, RngStream(2));
  const Trajectory tt = simulate_forward(s, truth, RngStream(9));
  const auto phys = net.links_of_kind(LinkKind::Physical);
  const CountSeries obs = tt.series(phys, 20, 1.0, 1);
  const LossBuilder builder = mse_loss_builder(obs, 1);

  const LinkParams start = sample_parameters(net, ranges, RngStream(3), true);
  SurrogateTrace trace;
  s.cfg.surrogate = &trace;
  const GradResult g0 =
      simulate_gradient(s, start, RngStream(9), builder, GradMode::FullTape);
  CHECK(g0.loss > 0.0);

  // probe the frozen-discontinuity surrogate along the descent direction
  trace.replay = true;
  auto surrogate_loss = [&](const LinkParams& p) {
    trace.rewind();
    const Trajectory tr = simulate_forward(s, p, RngStream(9));
    const CountSeries series = tr.series(phys, 20, 1.0, 1);
    return mse_loss_value(series, obs);
  };
  bool improved = false;
  for (const double lr : {1e-3, 1e-2}) {
    LinkParams stepped = start;
    for (std::size_t i = 0; i < stepped.u.size(); ++i) {
      stepped.u[i] -= lr * g0.grads.u[i];
      stepped.kappa[i] -= lr * 1e-4 * g0.grads.kappa[i];
      stepped.beta[i] -= lr * g0.grads.beta[i];
      stepped.alpha[i] -= lr * g0.grads.alpha[i];
    }
    improved = improved || surrogate_loss(stepped) < g0.loss;
  }
  CHECK(improved);
}

TEST_CASE("control fixed point at the uncontrolled target") {
  const Network net = chain_net();
  Scenario s;
  s.net = net;
  s.cfg.delta_n = 1;
  s.n_vehicles = 6;
  s.obs_interval_s = 20;
  s.horizon_steps = 60;
  const LinkParams p = sample_parameters(net, ParamRanges{}, RngStream(4), true);

  ForwardOptions frozen;  // iteration 0 matches the frozen optimizer noise
  const Trajectory tr = simulate_forward(s, p, RngStream(12), frozen);
  const double uncontrolled = tr.cum_final[1];

  ControlConfig cfg;
  cfg.opt.patience = 4;
  cfg.opt.max_iterations = 30;
  cfg.opt.resample_noise = false;
  const ControlResult r =
      optimize_control(s, p, 1, uncontrolled, cfg, RngStream(12));
  CHECK(r.best_loss == 0.0);
  CHECK(r.achieved == uncontrolled);
  for (double cst : r.cost) CHECK(cst == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("calibration divergence reports the offending block") {
  const Network net = chain_net();
  Scenario s;
  s.net = net;
  s.cfg.delta_n = 1;
  s.n_vehicles = 2;
  s.obs_interval_s = 20;
  s.horizon_steps = 20;

  CountSeries obs;
  obs.link_ids = {1};
  obs.interval_s = 20;
  obs.values = {{std::numeric_limits<double>::quiet_NaN()}};

  OptimizeConfig cfg;
  cfg.max_iterations = 3;
  CHECK_THROWS_AS(calibrate(s, obs, ParamRanges{}, cfg, RngStream(1)),
                  DivergenceError);
}
