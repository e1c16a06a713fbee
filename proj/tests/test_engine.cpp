#include "dtsim/engine.hpp"

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"

using namespace dtsim;

namespace {

constexpr double kM = 99999.0;

/// Inflow -> two physical links -> outflow.
Network chain_net(double phys_len = 200.0, double virt_len = 400.0) {
  std::vector<Link> links(4);
  links[0] = {0, 3, 0, virt_len, LinkKind::VirtualInflow};
  links[1] = {1, 0, 1, phys_len, LinkKind::Physical};
  links[2] = {2, 1, 2, phys_len, LinkKind::Physical};
  links[3] = {3, 2, 4, virt_len, LinkKind::VirtualOutflow};
  return make_network(5, links);
}

LinkParams flat_params(int L, double u = 16.0) {
  LinkParams p;
  p.u.assign(L, u);
  p.kappa.assign(L, 0.2);
  p.beta.assign(L, 1.0);
  p.alpha.assign(L, 1.0);
  p.cost.assign(L, 1.0);
  return p;
}

int valid_count(const std::vector<double>& x) {
  int n = 0;
  for (double v : x) n += (v >= kValidThreshold);
  return n;
}

}  // namespace

TEST_CASE("agent seeding") {
  // two inflow links, four agents: even split, queued at jam spacing
  std::vector<Link> links(3);
  links[0] = {0, 2, 0, 100.0, LinkKind::VirtualInflow};
  links[1] = {1, 3, 0, 100.0, LinkKind::VirtualInflow};
  links[2] = {2, 0, 4, 100.0, LinkKind::VirtualOutflow};
  Scenario s;
  s.net = make_network(5, links);
  s.cfg.delta_n = 1;
  s.n_vehicles = 4;
  const InitialState init = seed_agents(s);
  CHECK(init.link == std::vector<int>{0, 1, 0, 1});
  CHECK(init.pos == std::vector<double>{100, 100, 95, 95});

  // a single agent sits at the inflow end, ready to transfer
  s.n_vehicles = 1;
  const InitialState one = seed_agents(s);
  CHECK(one.pos == std::vector<double>{100});

  // platoon divisibility is enforced
  s.n_vehicles = 3;
  s.cfg.delta_n = 2;
  CHECK_THROWS(seed_agents(s));

  // an oversized queue is rejected with the required length
  s.n_vehicles = 100;
  s.cfg.delta_n = 1;
  CHECK_THROWS_WITH_AS(seed_agents(s), doctest::Contains("needs length"),
                       std::runtime_error);
  // after fitting the queues it goes through
  fit_inflow_queues(s);
  CHECK(seed_agents(s).pos.size() == 100);
  CHECK(s.net.links[0].length >= 49 * 5.0);
}

TEST_CASE("horizon arithmetic") {
  SimConfig c;
  c.delta_n = 1;
  CHECK(steps_for_minutes(c, 90.0) == 5400);
  c.delta_n = 2;
  CHECK(steps_for_minutes(c, 90.0) == 2700);  // doubling dt halves the steps
  c.delta_n = 7;
  CHECK_THROWS(steps_for_minutes(c, 1.0));  // 60 s not a multiple of 7 s
}

TEST_CASE("forward simulation basics") {
  Scenario s;
  s.net = chain_net();
  s.cfg.delta_n = 1;
  s.n_vehicles = 6;
  s.obs_interval_s = 10;
  s.horizon_steps = 0;

  const LinkParams p = flat_params(s.net.n_links());

  // zero horizon: nothing recorded, final state is the seeded state
  const Trajectory t0 = simulate_forward(s, p, RngStream(3));
  CHECK(t0.cum_per_step.empty());
  CHECK(valid_count(t0.X_final) == 6);

  s.horizon_steps = 60;
  ForwardOptions opt;
  opt.record_states = true;
  const Trajectory tr = simulate_forward(s, p, RngStream(3), opt);
  CHECK(static_cast<int>(tr.cum_per_step.size()) == 60);

  // conservation at every step
  for (const auto& x : tr.states) CHECK(valid_count(x) == 6);

  // determinism: bit-identical repeat
  const Trajectory tr2 = simulate_forward(s, p, RngStream(3), opt);
  CHECK(tr2.X_final == tr.X_final);
  CHECK(tr2.cum_per_step == tr.cum_per_step);

  // cumulative counts never decrease
  for (std::size_t t = 1; t < tr.cum_per_step.size(); ++t)
    for (std::size_t l = 0; l < tr.cum_per_step[t].size(); ++l)
      CHECK(tr.cum_per_step[t][l] >= tr.cum_per_step[t - 1][l]);

  // by 60 steps the queue has begun to drain through the chain
  double total = 0.0;
  for (double v : tr.cum_final) total += v;
  CHECK(total > 0.0);
}

TEST_CASE("one step matches the hand-computed two-agent case") {
  // single physical link, two agents placed mid-link, one step of 1 s
  std::vector<Link> links(1);
  links[0] = {0, 0, 1, 100.0, LinkKind::Physical};
  Scenario s;
  s.net = make_network(2, links);
  s.cfg.delta_n = 1;
  s.obs_interval_s = 1;
  s.horizon_steps = 1;
  s.custom_init = {{0, 0.0}, {0, 10.0}};
  LinkParams p = flat_params(1, 15.0);

  const Trajectory tr = simulate_forward(s, p, RngStream(1));
  // follower: min(15, 10 - 5) = 5; leader free-flows
  CHECK(tr.X_final[0] == 5.0);
  CHECK(tr.X_final[1] == 25.0);
  // neither has crossed the midpoint counter at 50
  CHECK(tr.cum_final == std::vector<double>{0.0});
}

TEST_CASE("checkpointed backward equals the full tape") {
  Scenario s;
  s.net = chain_net(150.0, 200.0);
  s.cfg.delta_n = 1;
  s.n_vehicles = 5;
  s.obs_interval_s = 5;
  s.horizon_steps = 25;
  const LinkParams p = flat_params(s.net.n_links(), 17.0);

  const LossBuilder builder = [](Tape&, const LossInputs& li) -> Tensor {
    Tensor total = reduce_sum(li.cum_final, kAxisAll);
    // exercise the snapshot path as well
    Tensor mid = reduce_sum(li.snapshots[1], kAxisAll);
    return add(total, scale(mid, 0.5));
  };

  const GradResult full =
      simulate_gradient(s, p, RngStream(11), builder, GradMode::FullTape);
  const GradResult ckpt =
      simulate_gradient(s, p, RngStream(11), builder, GradMode::Checkpointed);

  CHECK(full.loss == doctest::Approx(ckpt.loss).epsilon(1e-15));
  REQUIRE(full.grads.u.size() == ckpt.grads.u.size());
  double max_diff = 0.0;
  auto cmp = [&](const std::vector<double>& a, const std::vector<double>& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
      max_diff = std::max(max_diff, std::abs(a[i] - b[i]));
  };
  cmp(full.grads.u, ckpt.grads.u);
  cmp(full.grads.kappa, ckpt.grads.kappa);
  cmp(full.grads.beta, ckpt.grads.beta);
  cmp(full.grads.alpha, ckpt.grads.alpha);
  cmp(full.grads.cost, ckpt.grads.cost);
  CHECK(max_diff <= 1e-12);

  // the gradient of the count w.r.t. speeds is informative (non-zero)
  double norm = 0.0;
  for (double v : full.grads.u) norm += std::abs(v);
  CHECK(norm > 0.0);

  // relaxed choices cannot use compact checkpoints
  Scenario soft = s;
  soft.cfg.soft_choices = true;
  CHECK_THROWS(simulate_gradient(soft, p, RngStream(11), builder,
                                 GradMode::Checkpointed));
}

TEST_CASE("gradient runs reproduce the forward trajectory") {
  Scenario s;
  s.net = chain_net();
  s.cfg.delta_n = 2;
  s.n_vehicles = 8;
  s.obs_interval_s = 10;
  s.horizon_steps = 20;
  const LinkParams p = flat_params(s.net.n_links());

  const Trajectory fwd = simulate_forward(s, p, RngStream(5));
  const LossBuilder builder = [](Tape&, const LossInputs& li) {
    return reduce_sum(li.cum_final, kAxisAll);
  };
  const GradResult g =
      simulate_gradient(s, p, RngStream(5), builder, GradMode::Checkpointed);
  CHECK(g.cum_final_values == fwd.cum_final);
  CHECK(g.X_final_values == fwd.X_final);
  // snapshots land on the interval boundaries of the forward run
  REQUIRE(g.snapshot_values.size() == 4);
  CHECK(g.snapshot_values[0] == fwd.cum_per_step[4]);
  CHECK(g.snapshot_values[3] == fwd.cum_per_step[19]);
}
