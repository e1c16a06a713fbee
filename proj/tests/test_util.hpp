#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dtsim/rng.hpp"

namespace dtsim_test {

/// Central finite differences of a scalar function of a vector.
inline std::vector<double> fd_gradient(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    const double step = h * std::max(1.0, std::abs(x0));
    x[i] = x0 + step;
    const double fp = f(x);
    x[i] = x0 - step;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

inline double rel_err(double a, double b, double floor = 1e-9) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Direct scalar evaluation of the mesoscopic car-following rule on one
/// link: next position is the smaller of the free-flow advance and the
/// position keeping the jam spacing behind the leader, clamped against
/// backward motion and capped at the link end. Written as a plain loop,
/// independent of the tensor pipeline it cross-checks.
inline std::vector<double> newell_reference_step(
    const std::vector<double>& x, double u, double kappa, double link_len,
    int delta_n, double tau, double sentinel, double valid_thr = -1e-2) {
  const int n = static_cast<int>(x.size());
  const double dt = tau * delta_n;
  const double jam = delta_n / kappa;

  std::vector<int> order;
  for (int i = 0; i < n; ++i)
    if (x[i] >= valid_thr) order.push_back(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return x[a] > x[b]; });

  std::vector<double> out = x;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const int i = order[k];
    const double headway = k == 0 ? sentinel : x[order[k - 1]] - x[i];
    const double dx_free = u * dt;
    const double dx_cong = std::max(headway - jam, 0.0);
    const double next = x[i] + std::min(dx_cong, dx_free);
    out[i] = std::min(next, link_len);
  }
  return out;
}

/// Deterministic pseudo-random doubles for test data.
inline double trand(std::uint64_t seed, std::uint64_t i, double lo, double hi) {
  return dtsim::RngStream(seed).uniform_in(lo, hi, i);
}

}  // namespace dtsim_test
