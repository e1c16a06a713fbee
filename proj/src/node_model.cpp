#include "dtsim/node_model.hpp"

#include <algorithm>

namespace dtsim {

namespace {

/// Gumbel-softmax sampling along the column axis of a utility tensor,
/// followed by the straight-through substitution (skipped in soft mode):
/// the forward value is the exact argmax one-hot while gradients flow
/// through the relaxed sample.
Tensor sample_choices(const Tensor& utilities, const SimConfig& cfg,
                      const RngStream& rng, std::uint64_t step,
                      BranchTrace* bt, const std::vector<int>* row_keys,
                      const std::vector<int>* col_keys) {
  Tensor logz = log_softmax(utilities, kAxisCols);
  Tensor noise =
      gumbel_sample_keys(utilities.shape(), rng, step, row_keys, col_keys);
  Tensor pi = softmax(scale(add(logz, noise), 1.0 / cfg.gumbel_tau), kAxisCols);
  if (cfg.soft_choices) return pi;
  Tensor hard = onehot_argmax_rows(pi);
  if (bt) bt->note_pattern(hard.vals());
  return traced_graft(hard, pi, cfg);
}

std::vector<double> vacancy_from_state(const Tensor& X, const NodeInputs& in,
                                       const SimConfig& cfg) {
  const int N = X.rows(), L = X.cols();
  std::vector<double> vacant(L);
  const auto& xv = X.vals();
  for (int j = 0; j < L; ++j) {
    double mn = cfg.sentinel;
    for (int i = 0; i < N; ++i) {
      const double x = xv[static_cast<std::size_t>(i) * L + j];
      if (x >= kValidThreshold && x < mn) mn = x;
    }
    vacant[j] = mn > cfg.delta_n / in.kappa_values[j] ? 1.0 : 0.0;
  }
  return vacant;
}

}  // namespace

Tensor link_choice(const Tensor& X, const NodeInputs& in, const SimConfig& cfg,
                   const RngStream& rng, std::uint64_t step, BranchTrace* bt,
                   const AgentSubset& subset) {
  const int N = X.rows(), L = X.cols();
  const Tensor valid = indicator_ge(X, kValidThreshold);
  if (bt) bt->note_pattern(valid.vals());

  // Candidate successor links of each agent's current link.
  const Tensor l_star = matmul(valid, in.A);

  Tensor pref = transpose(divide(in.beta, in.cost));  // 1 x L
  Tensor V = mul(l_star, pref, Broadcast::Row);
  // Impossible transitions get a large negative utility.
  {
    std::vector<double> m(static_cast<std::size_t>(N) * L);
    for (int i = 0; i < N * L; ++i)
      m[i] = l_star.vals()[i] == 0.0 ? kMaskLarge : 0.0;
    V = sub(V, Tensor::from(std::move(m), {N, L}));
  }

  Tensor picked = sample_choices(V, cfg, rng.fork(rng_lane::kGumbelLink), step,
                                 bt, subset.agent_rows, nullptr);

  // Arrival: the agent stands at the end of its current link.
  std::vector<double> arrive_thr(L);
  for (int j = 0; j < L; ++j) arrive_thr[j] = in.lengths[j] - kArrivalTol;
  const Tensor arrived_elem =
      indicator_ge(X, Tensor::from(arrive_thr, {1, L}), Broadcast::Row);
  const Tensor arrived = reduce_sum(arrived_elem, kAxisCols);  // N x 1, 0/1

  // Vacancy: the rearmost agent on a link sits beyond the jam spacing.
  const std::vector<double> vacant =
      subset.vacancy ? *subset.vacancy : vacancy_from_state(X, in, cfg);

  // Connectivity: the current link has at least one successor.
  std::vector<double> connected(N);
  for (int i = 0; i < N; ++i) {
    double mx = 0.0;
    for (int j = 0; j < L; ++j)
      mx = std::max(mx, l_star.vals()[static_cast<std::size_t>(i) * L + j]);
    connected[i] = mx;
  }
  if (bt) {
    bt->note_pattern(arrived.vals());
    bt->note_pattern(vacant);
    bt->note_pattern(connected);
  }

  Tensor l = mul(picked, Tensor::from(vacant, {1, L}), Broadcast::Row);
  l = mul(l, arrived, Broadcast::Col);
  l = mul(l, Tensor::from(connected, {N, 1}), Broadcast::Col);
  return l;
}

Tensor merge_choice(const Tensor& l, const Tensor& X, const NodeInputs& in,
                    const SimConfig& cfg, const RngStream& rng,
                    std::uint64_t step, BranchTrace* bt,
                    const AgentSubset& subset) {
  const Tensor valid = indicator_ge(X, kValidThreshold);
  // Merge priority of each agent's current link, spread over its choice row.
  Tensor agent_priority = matmul(valid, in.alpha);  // N x 1
  Tensor p = transpose(mul(l, agent_priority, Broadcast::Col));  // L x N

  const int L = p.rows(), N = p.cols();
  std::vector<double> m(static_cast<std::size_t>(L) * N);
  for (int i = 0; i < L * N; ++i)
    m[i] = p.vals()[i] == 0.0 ? kMaskLarge : 0.0;
  Tensor Vp = sub(p, Tensor::from(std::move(m), {L, N}));

  Tensor picked = sample_choices(Vp, cfg, rng.fork(rng_lane::kGumbelMerge),
                                 step, bt, nullptr, subset.agent_rows);

  // Links nobody targets admit nobody.
  Tensor targeted = transpose(reduce_max(l, kAxisRows));  // L x 1
  return mul(picked, targeted, Broadcast::Col);
}

Tensor transfer(const Tensor& X, const Tensor& a, const SimConfig& cfg) {
  const int N = X.rows();
  Tensor a_t = transpose(a);                             // N x L
  Tensor admitted = reduce_sum(a_t, kAxisCols);          // N x 1, 0/1
  const Tensor valid = indicator_ge(X, kValidThreshold);
  Tensor remove = mul(valid, admitted, Broadcast::Col);  // N x L

  Tensor x_bar = reduce_max(X, kAxisCols);  // N x 1: current positions

  // Exact sentinel write-back: value -M with the paper's -(M + x) gradient.
  Tensor removal_value =
      cfg.trajectory_grafting
          ? sub(Tensor::full({N, 1}, -cfg.sentinel),
                traced_carrier(x_bar, cfg))
          : Tensor::full({N, 1}, -cfg.sentinel);
  // Entry value exactly 0 on the new link: -M + M, with the old position's
  // history grafted on.
  Tensor entry_value =
      cfg.trajectory_grafting
          ? traced_graft(Tensor::full({N, 1}, cfg.sentinel), x_bar, cfg)
          : Tensor::full({N, 1}, cfg.sentinel);

  Tensor keep = sub(Tensor::ones(X.shape()), remove);
  Tensor out = mul(X, keep);
  out = add(out, mul(remove, removal_value, Broadcast::Col));
  out = add(out, mul(a_t, entry_value, Broadcast::Col));
  return out;
}

Tensor node_step(const Tensor& X, const NodeInputs& in, const SimConfig& cfg,
                 const RngStream& rng, std::uint64_t step, BranchTrace* bt) {
  const int N = X.rows(), L = X.cols();
  const auto& xv = X.vals();

  // Only agents standing at their link end can do anything this step; the
  // choice stages restricted to those rows reproduce the full-state result
  // value for value (masked rows are exactly zero there).
  std::vector<int> arrived_rows;
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < L; ++j) {
      const double x = xv[static_cast<std::size_t>(i) * L + j];
      if (x >= kValidThreshold && x >= in.lengths[j] - kArrivalTol) {
        arrived_rows.push_back(i);
        break;
      }
    }
  if (bt) bt->note_indices(arrived_rows);
  if (arrived_rows.empty()) return X;

  const std::vector<double> vacant = vacancy_from_state(X, in, cfg);

  AgentSubset subset;
  subset.agent_rows = &arrived_rows;
  subset.vacancy = &vacant;
  Tensor X_sub = gather_rows(X, arrived_rows);
  Tensor l_sub = link_choice(X_sub, in, cfg, rng, step, bt, subset);
  Tensor a_sub = merge_choice(l_sub, X_sub, in, cfg, rng, step, bt, subset);
  Tensor moved = transfer(X_sub, a_sub, cfg);
  return replace_rows(X, arrived_rows, moved);
}

}  // namespace dtsim
