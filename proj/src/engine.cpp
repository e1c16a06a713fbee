#include "dtsim/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace dtsim {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct ParamTensors {
  Tensor u, kappa, beta, alpha, cost;
};

ParamTensors lift_params(Tape* tape, const LinkParams& p) {
  auto mk = [&](const std::vector<double>& v) {
    const Shape s{static_cast<int>(v.size()), 1};
    return tape ? tape->leaf(v, s) : Tensor::from(v, s);
  };
  return {mk(p.u), mk(p.kappa), mk(p.beta), mk(p.alpha), mk(p.cost)};
}

struct EngineCtx {
  const Scenario* sc = nullptr;
  std::vector<double> lengths;
  std::vector<double> counter_pos;
  Tensor A;
  RngStream rng{0};
  BranchTrace* bt = nullptr;
  int steps_per_interval = 0;
};

EngineCtx make_ctx(const Scenario& s, const RngStream& rng,
                   const ForwardOptions& opt, BranchTrace* bt) {
  EngineCtx ctx;
  ctx.sc = &s;
  ctx.lengths = s.net.lengths();
  ctx.counter_pos.resize(ctx.lengths.size());
  for (std::size_t j = 0; j < ctx.lengths.size(); ++j)
    ctx.counter_pos[j] = 0.5 * ctx.lengths[j];
  ctx.A = s.net.adjacency_tensor();
  ctx.rng = rng.fork(rng_lane::kIteration).fork(opt.noise_iteration);
  ctx.bt = bt;

  const double dt = s.cfg.dt();
  const double spi = s.obs_interval_s / dt;
  if (std::abs(spi - std::round(spi)) > 1e-9 || spi < 1.0)
    throw std::runtime_error(
        "observation interval must be a positive multiple of the time step");
  ctx.steps_per_interval = static_cast<int>(std::llround(spi));
  return ctx;
}

struct StepState {
  Tensor X, cum, qprev;
};

/// One simulator step: per-link position update (f), midpoint counting,
/// then the node model (g). The update runs on per-link gathered agent
/// subsets; because invalid entries are exactly the sentinel and every
/// masked contribution is an exact zero, the result is value-identical to
/// the whole-tensor formulation (the module tests assert this).
StepState engine_step(const StepState& s, const ParamTensors& P,
                      const EngineCtx& ctx, int t) {
  const int N = s.X.rows(), L = s.X.cols();
  const SimConfig& cfg = ctx.sc->cfg;
  const auto& xv = s.X.vals();

  std::vector<std::vector<int>> agents_on(L);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < L; ++j)
      if (xv[static_cast<std::size_t>(i) * L + j] >= kValidThreshold) {
        agents_on[j].push_back(i);
        break;
      }

  std::vector<Tensor> pieces, counts;
  counts.reserve(L);
  std::vector<int> flat_idx;
  for (int j = 0; j < L; ++j) {
    if (agents_on[j].empty()) {
      counts.push_back(Tensor::zeros({1, 1}));
      continue;
    }
    std::vector<int> idx(agents_on[j].size());
    for (std::size_t k = 0; k < idx.size(); ++k)
      idx[k] = agents_on[j][k] * L + j;
    if (ctx.bt) ctx.bt->note_indices(idx);
    Tensor x_sub = gather(s.X, idx);
    Tensor x1 = car_following_step(x_sub, gather(P.u, {j}),
                                   gather(P.kappa, {j}), ctx.lengths[j], cfg,
                                   ctx.bt);
    counts.push_back(
        midpoint_count(x1, ctx.counter_pos[j], ctx.lengths[j], cfg, ctx.bt));
    pieces.push_back(std::move(x1));
    flat_idx.insert(flat_idx.end(), idx.begin(), idx.end());
  }
  Tensor X1 = pieces.empty()
                  ? s.X
                  : scatter_to(vconcat(pieces), flat_idx, Shape{N, L},
                               -cfg.sentinel);
  Tensor q = transpose(hstack_cols(counts));  // L x 1

  Tensor inc = traced_relu(sub(q, s.qprev), cfg);
  if (ctx.bt && !cfg.surrogate) ctx.bt->note_pattern(inc.vals());
  Tensor cum = add(s.cum, inc);

  NodeInputs ni;
  ni.A = ctx.A;
  ni.lengths = ctx.lengths;
  ni.beta = P.beta;
  ni.cost = P.cost;
  ni.alpha = P.alpha;
  ni.kappa_values = P.kappa.vals();
  Tensor X2 = node_step(X1, ni, cfg, ctx.rng, static_cast<std::uint64_t>(t),
                        ctx.bt);
  return {std::move(X2), std::move(cum), std::move(q)};
}

std::vector<double> initial_counts(const Tensor& X0, const EngineCtx& ctx) {
  const int L = X0.cols();
  std::vector<double> q0(L, 0.0);
  for (int j = 0; j < L; ++j) {
    Tensor c = midpoint_count(col(X0, j), ctx.counter_pos[j], ctx.lengths[j]);
    q0[j] = c.scalar();
  }
  return q0;
}

}  // namespace

int Scenario::n_agents() const {
  if (!custom_init.empty()) return static_cast<int>(custom_init.size());
  if (cfg.delta_n < 1) throw std::runtime_error("platoon size must be >= 1");
  if (n_vehicles % cfg.delta_n != 0)
    throw std::runtime_error(
        "vehicle count " + std::to_string(n_vehicles) +
        " is not divisible into platoons of " + std::to_string(cfg.delta_n));
  return n_vehicles / cfg.delta_n;
}

int steps_for_minutes(const SimConfig& cfg, double minutes) {
  const double steps = minutes * 60.0 / cfg.dt();
  if (std::abs(steps - std::round(steps)) > 1e-9)
    throw std::runtime_error("horizon must be a whole number of time steps");
  return static_cast<int>(std::llround(steps));
}

InitialState seed_agents(const Scenario& s) {
  InitialState init;
  if (!s.custom_init.empty()) {
    for (const auto& p : s.custom_init) {
      init.link.push_back(p.link);
      init.pos.push_back(p.pos);
    }
    return init;
  }
  const int n = s.n_agents();
  const auto inflows = s.net.links_of_kind(LinkKind::VirtualInflow);
  if (inflows.empty())
    throw std::runtime_error("scenario network has no virtual inflow links");
  const double spacing = s.cfg.delta_n / s.seeding_kappa;
  const int n_in = static_cast<int>(inflows.size());
  std::vector<int> rank(n_in, 0);
  init.link.resize(n);
  init.pos.resize(n);
  for (int a = 0; a < n; ++a) {
    const int q = a % n_in;
    const int lid = inflows[q];
    const double pos = s.net.links[lid].length - rank[q] * spacing;
    if (pos < 0.0) {
      const double need = rank[q] * spacing;
      throw std::runtime_error(
          "inflow queue does not fit: virtual link " + std::to_string(lid) +
          " needs length >= " + std::to_string(need) + " m");
    }
    init.link[a] = lid;
    init.pos[a] = pos;
    ++rank[q];
  }
  return init;
}

void fit_inflow_queues(Scenario& s) {
  if (!s.custom_init.empty()) return;
  const auto inflows = s.net.links_of_kind(LinkKind::VirtualInflow);
  if (!inflows.empty()) {
    // Queue room per inflow link, measured in vehicles so the expanded
    // geometry does not depend on the platoon size.
    const int n_in = static_cast<int>(inflows.size());
    const int veh_per_inflow = (s.n_vehicles + n_in - 1) / n_in;
    const double need = veh_per_inflow / s.seeding_kappa;
    for (int q = 0; q < n_in; ++q) {
      auto& link = s.net.links[inflows[q]];
      link.length = std::max(link.length, need);
    }
  }
  // Outflow links are exit sinks: agents freeze at their far end, so each
  // must have queue room for every vehicle that could leave through it,
  // or a full sink would block the upstream network.
  const double sink_need = s.n_vehicles / s.seeding_kappa;
  for (int lid : s.net.links_of_kind(LinkKind::VirtualOutflow)) {
    auto& link = s.net.links[lid];
    link.length = std::max(link.length, sink_need);
  }
}

Tensor initial_state_tensor(const InitialState& init, int n_links,
                            double sentinel) {
  const int n = static_cast<int>(init.link.size());
  std::vector<double> x(static_cast<std::size_t>(n) * n_links, -sentinel);
  for (int a = 0; a < n; ++a) {
    if (init.link[a] < 0 || init.link[a] >= n_links)
      throw std::runtime_error("agent placed on a link that does not exist");
    x[static_cast<std::size_t>(a) * n_links + init.link[a]] = init.pos[a];
  }
  return Tensor::from(std::move(x), {n, n_links});
}

Trajectory simulate_forward(const Scenario& s, const LinkParams& params,
                            const RngStream& rng, const ForwardOptions& opt) {
  const auto t0 = Clock::now();
  BranchTrace trace;
  EngineCtx ctx = make_ctx(s, rng, opt, opt.trace_branches ? &trace : nullptr);

  const InitialState init = seed_agents(s);
  const int L = s.net.n_links();
  StepState st;
  st.X = initial_state_tensor(init, L, s.cfg.sentinel);
  st.cum = Tensor::zeros({L, 1});
  st.qprev = Tensor::from(initial_counts(st.X, ctx), {L, 1});
  const ParamTensors P = lift_params(nullptr, params);

  Trajectory out;
  out.steps = s.horizon_steps;
  out.cum_per_step.reserve(s.horizon_steps);
  for (int t = 0; t < s.horizon_steps; ++t) {
    st = engine_step(st, P, ctx, t);
    out.cum_per_step.push_back(st.cum.vals());
    if (opt.record_states) out.states.push_back(st.X.vals());
  }
  out.X_final = st.X.vals();
  out.cum_final = st.cum.vals();
  out.branch_hash = trace.h;
  out.wall_seconds = seconds_since(t0);
  return out;
}

namespace {

/// Compact per-step state: exact because every entry of X is either the
/// sentinel or the agent's position.
struct Checkpoint {
  std::vector<int> link;
  std::vector<double> pos;
  std::vector<double> cum;
  std::vector<double> qprev;
};

Checkpoint compact_state(const StepState& st, double sentinel, int L) {
  Checkpoint c;
  const auto& xv = st.X.vals();
  const int N = st.X.rows();
  c.link.assign(N, -1);
  c.pos.assign(N, 0.0);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < L; ++j) {
      const double x = xv[static_cast<std::size_t>(i) * L + j];
      if (x != -sentinel) {
        c.link[i] = j;
        c.pos[i] = x;
        break;
      }
    }
  c.cum = st.cum.vals();
  c.qprev = st.qprev.vals();
  return c;
}

std::vector<double> dense_state(const Checkpoint& c, int L, double sentinel) {
  const int N = static_cast<int>(c.link.size());
  std::vector<double> x(static_cast<std::size_t>(N) * L, -sentinel);
  for (int i = 0; i < N; ++i)
    if (c.link[i] >= 0)
      x[static_cast<std::size_t>(i) * L + c.link[i]] = c.pos[i];
  return x;
}

void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
  if (dst.empty()) dst.assign(src.size(), 0.0);
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

GradResult simulate_gradient(const Scenario& s, const LinkParams& params,
                             const RngStream& rng, const LossBuilder& builder,
                             GradMode mode, const ForwardOptions& opt) {
  if (mode == GradMode::Checkpointed && s.cfg.soft_choices)
    throw std::runtime_error(
        "checkpointed backward requires discrete choices (compact state "
        "snapshots are exact only for one-link-per-agent states)");
  const auto t0 = Clock::now();
  BranchTrace trace;
  EngineCtx ctx = make_ctx(s, rng, opt, opt.trace_branches ? &trace : nullptr);

  const InitialState init = seed_agents(s);
  const int L = s.net.n_links();
  const int T = s.horizon_steps;
  const Tensor X0 = initial_state_tensor(init, L, s.cfg.sentinel);
  const std::vector<double> q0 = initial_counts(X0, ctx);

  GradResult res;
  auto is_boundary = [&](int t) {
    return (t + 1) % ctx.steps_per_interval == 0;
  };

  if (mode == GradMode::FullTape) {
    Tape tape;
    const ParamTensors P = lift_params(&tape, params);
    StepState st{tape.leaf(X0), tape.leaf(Tensor::zeros({L, 1})),
                 tape.leaf(q0, {L, 1})};
    LossInputs li;
    for (int t = 0; t < T; ++t) {
      st = engine_step(st, P, ctx, t);
      if (is_boundary(t)) {
        li.snapshots.push_back(st.cum);
        res.snapshot_values.push_back(st.cum.vals());
      }
    }
    li.X_final = st.X;
    li.cum_final = st.cum;
    res.cum_final_values = st.cum.vals();
    res.X_final_values = st.X.vals();
    Tensor loss = builder(tape, li);
    res.loss = loss.scalar();
    GradMap g = tape.backward(loss);
    res.grads.u = g.of(P.u);
    res.grads.kappa = g.of(P.kappa);
    res.grads.beta = g.of(P.beta);
    res.grads.alpha = g.of(P.alpha);
    res.grads.cost = g.of(P.cost);
  } else {
    // Forward pass storing one compact checkpoint per step.
    std::vector<Checkpoint> cps;
    cps.reserve(T);
    StepState st{X0, Tensor::zeros({L, 1}), Tensor::from(q0, {L, 1})};
    const ParamTensors Pc = lift_params(nullptr, params);
    std::vector<int> snap_steps;
    for (int t = 0; t < T; ++t) {
      cps.push_back(compact_state(st, s.cfg.sentinel, L));
      st = engine_step(st, Pc, ctx, t);
      if (is_boundary(t)) {
        snap_steps.push_back(t);
        res.snapshot_values.push_back(st.cum.vals());
      }
    }

    res.cum_final_values = st.cum.vals();
    res.X_final_values = st.X.vals();

    // Loss over leaves that stand in for the recorded snapshots.
    Tape ltape;
    LossInputs li;
    for (const auto& v : res.snapshot_values)
      li.snapshots.push_back(ltape.leaf(v, {L, 1}));
    li.X_final = ltape.leaf(st.X);
    li.cum_final = ltape.leaf(st.cum);
    Tensor loss = builder(ltape, li);
    res.loss = loss.scalar();
    GradMap lg = ltape.backward(loss);

    std::vector<double> adjX = lg.of(li.X_final);
    std::vector<double> adjCum = lg.of(li.cum_final);
    std::vector<double> adjQ(L, 0.0);
    std::vector<std::vector<double>> snap_grads;
    snap_grads.reserve(li.snapshots.size());
    for (const auto& t : li.snapshots) snap_grads.push_back(lg.of(t));

    // Reverse sweep with per-step segment replay.
    int snap_idx = static_cast<int>(snap_steps.size()) - 1;
    for (int t = T - 1; t >= 0; --t) {
      if (snap_idx >= 0 && snap_steps[snap_idx] == t) {
        for (int i = 0; i < L; ++i) adjCum[i] += snap_grads[snap_idx][i];
        --snap_idx;
      }
      Tape seg;
      const ParamTensors P = lift_params(&seg, params);
      StepState sin{seg.leaf(dense_state(cps[t], L, s.cfg.sentinel),
                             {static_cast<int>(cps[t].link.size()), L}),
                    seg.leaf(cps[t].cum, {L, 1}),
                    seg.leaf(cps[t].qprev, {L, 1})};
      StepState sout = engine_step(sin, P, ctx, t);
      std::vector<GradSeed> seeds;
      seeds.reserve(3);
      seeds.push_back({sout.X.node(), std::move(adjX)});
      seeds.push_back({sout.cum.node(), std::move(adjCum)});
      seeds.push_back({sout.qprev.node(), std::move(adjQ)});
      GradMap g = seg.vjp(std::move(seeds));
      adjX = g.take(sin.X);
      adjCum = g.take(sin.cum);
      adjQ = g.take(sin.qprev);
      accumulate(res.grads.u, g.of(P.u));
      accumulate(res.grads.kappa, g.of(P.kappa));
      accumulate(res.grads.beta, g.of(P.beta));
      accumulate(res.grads.alpha, g.of(P.alpha));
      accumulate(res.grads.cost, g.of(P.cost));
    }
    if (res.grads.u.empty()) {
      // zero-step horizon: gradients are all zero
      res.grads.u.assign(L, 0.0);
      res.grads.kappa.assign(L, 0.0);
      res.grads.beta.assign(L, 0.0);
      res.grads.alpha.assign(L, 0.0);
      res.grads.cost.assign(L, 0.0);
    }
  }

  res.branch_hash = trace.h;
  res.wall_seconds = seconds_since(t0);
  return res;
}

}  // namespace dtsim
