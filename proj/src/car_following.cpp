#include "dtsim/car_following.hpp"

#include <algorithm>
#include <stdexcept>

namespace dtsim {

namespace {

[[noreturn]] void trace_fail(const char* what) {
  throw std::runtime_error(std::string("surrogate trace misaligned: ") + what);
}

}  // namespace

Tensor traced_graft(const Tensor& v_new, const Tensor& v_old,
                    const SimConfig& cfg) {
  SurrogateTrace* tr = cfg.surrogate;
  if (!tr) return graft(v_new, v_old);
  if (!tr->replay) {
    tr->graft_new.push_back(v_new.vals());
    tr->graft_old.push_back(v_old.vals());
    return graft(v_new, v_old);
  }
  if (tr->gi >= tr->graft_new.size()) trace_fail("graft count");
  const auto& n0 = tr->graft_new[tr->gi];
  const auto& o0 = tr->graft_old[tr->gi];
  ++tr->gi;
  if (static_cast<int>(n0.size()) != v_new.numel()) trace_fail("graft shape");
  return add(sub(v_old, Tensor::from(o0, v_old.shape())),
             Tensor::from(n0, v_new.shape()));
}

Tensor traced_carrier(const Tensor& v, const SimConfig& cfg) {
  SurrogateTrace* tr = cfg.surrogate;
  if (!tr) return sub(v, stop_gradient(v));
  if (!tr->replay) {
    tr->carriers.push_back(v.vals());
    return sub(v, stop_gradient(v));
  }
  if (tr->ci >= tr->carriers.size()) trace_fail("carrier count");
  const auto& v0 = tr->carriers[tr->ci];
  ++tr->ci;
  if (static_cast<int>(v0.size()) != v.numel()) trace_fail("carrier shape");
  return sub(v, Tensor::from(v0, v.shape()));
}

namespace {

Tensor apply_frozen_pick(const Tensor& a, const Tensor& b,
                         const std::vector<std::uint8_t>& pick) {
  std::vector<double> pa(pick.size()), pb(pick.size());
  for (std::size_t i = 0; i < pick.size(); ++i) {
    pa[i] = pick[i] ? 1.0 : 0.0;
    pb[i] = pick[i] ? 0.0 : 1.0;
  }
  return add(mul(a, Tensor::from(std::move(pa), a.shape())),
             mul(b, Tensor::from(std::move(pb), b.shape())));
}

}  // namespace

Tensor traced_min(const Tensor& a, const Tensor& b, const SimConfig& cfg) {
  SurrogateTrace* tr = cfg.surrogate;
  if (!tr) return emin(a, b);
  if (!tr->replay) {
    std::vector<std::uint8_t> pick(a.numel());
    for (int i = 0; i < a.numel(); ++i) pick[i] = a.vals()[i] <= b.vals()[i];
    tr->picks.push_back(std::move(pick));
    return emin(a, b);
  }
  if (tr->pi >= tr->picks.size()) trace_fail("pick count");
  const auto& pick = tr->picks[tr->pi];
  ++tr->pi;
  if (static_cast<int>(pick.size()) != a.numel()) trace_fail("pick shape");
  return apply_frozen_pick(a, b, pick);
}

Tensor traced_relu(const Tensor& a, const SimConfig& cfg) {
  SurrogateTrace* tr = cfg.surrogate;
  const Tensor zero = Tensor::zeros(a.shape());
  if (!tr) return emax(a, zero);
  if (!tr->replay) {
    std::vector<std::uint8_t> pick(a.numel());
    for (int i = 0; i < a.numel(); ++i) pick[i] = a.vals()[i] >= 0.0;
    tr->picks.push_back(std::move(pick));
    return emax(a, zero);
  }
  if (tr->pi >= tr->picks.size()) trace_fail("pick count");
  const auto& pick = tr->picks[tr->pi];
  ++tr->pi;
  if (static_cast<int>(pick.size()) != a.numel()) trace_fail("pick shape");
  return apply_frozen_pick(a, zero, pick);
}

Tensor headways(const Tensor& x_col, double sentinel, BranchTrace* bt) {
  const int n = x_col.rows();
  if (n == 0) return x_col;
  const Tensor valid = indicator_ge(x_col, kValidThreshold);
  const Tensor invalid = indicator_lt(x_col, kValidThreshold);

  // Auxiliary positions: invalid agents pushed to -kMaskLarge so they sort
  // behind every real position.
  Tensor x_tilde = sub(mul(x_col, valid), scale(invalid, kMaskLarge));

  const std::vector<int> order = argsort_desc(x_tilde);
  if (bt) bt->note_indices(order);

  // Predecessor (next agent ahead) in sorted order; the front entry is a
  // dummy self-reference masked out below.
  std::vector<int> prev(n);
  prev[0] = order[0];
  for (int k = 1; k < n; ++k) prev[k] = order[k - 1];

  Tensor diff = sub(gather(x_tilde, prev), gather(x_tilde, order));
  std::vector<double> not_first(n, 1.0), front_fill(n, 0.0);
  if (n > 0) {
    not_first[0] = 0.0;
    front_fill[0] = sentinel;
  }
  Tensor diff_fixed = add(mul(diff, Tensor::from(not_first, {n, 1})),
                          Tensor::from(front_fill, {n, 1}));
  Tensor h_sorted = scatter_to(diff_fixed, order, n, 0.0);
  // Invalid agents carry meaningless differences; overwrite with sentinel.
  return add(mul(h_sorted, valid), scale(invalid, sentinel));
}

Tensor car_following_step(const Tensor& x_col, const Tensor& u_j,
                          const Tensor& kappa_j, double link_length,
                          const SimConfig& cfg, BranchTrace* bt) {
  const int n = x_col.rows();
  const Tensor valid = indicator_ge(x_col, kValidThreshold);
  if (bt) bt->note_pattern(valid.vals());

  Tensor dx_free = scale(mul(valid, u_j, Broadcast::Scalar), cfg.dt());

  Tensor h = headways(x_col, cfg.sentinel, bt);
  Tensor jam = divide(Tensor::scalar_of(static_cast<double>(cfg.delta_n)),
                      kappa_j);
  Tensor gap = sub(h, jam, Broadcast::Scalar);
  Tensor dx_cong = mul(traced_relu(gap, cfg), valid);
  if (bt && !cfg.surrogate) {
    bt->note_bits(gap.vals(), std::vector<double>(n, 0.0));
    bt->note_bits(dx_cong.vals(), dx_free.vals());
  }

  // Congested branch first: on exact ties its gradient path is selected.
  Tensor dx = traced_min(dx_cong, dx_free, cfg);
  Tensor x_prime = add(x_col, dx);

  Tensor length_cap = Tensor::full({n, 1}, link_length);
  Tensor limit = cfg.trajectory_grafting
                     ? traced_graft(length_cap, x_prime, cfg)
                     : length_cap;
  if (bt && !cfg.surrogate) bt->note_bits(x_prime.vals(), limit.vals());
  return traced_min(x_prime, limit, cfg);
}

Tensor position_update_all(const Tensor& X, const Tensor& u,
                           const Tensor& kappa,
                           const std::vector<double>& lengths,
                           const SimConfig& cfg, BranchTrace* bt) {
  const int L = X.cols();
  std::vector<Tensor> cols;
  cols.reserve(L);
  for (int j = 0; j < L; ++j) {
    Tensor x_col = col(X, j);
    const auto& v = x_col.vals();
    const bool any_valid = std::any_of(
        v.begin(), v.end(), [](double x) { return x >= kValidThreshold; });
    if (!any_valid) {
      cols.push_back(std::move(x_col));
      continue;
    }
    cols.push_back(car_following_step(x_col, gather(u, {j}), gather(kappa, {j}),
                                      lengths[j], cfg, bt));
  }
  return hstack_cols(cols);
}

}  // namespace dtsim
