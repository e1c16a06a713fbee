#include "dtsim/observation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dtsim {

Tensor midpoint_count(const Tensor& x_col, double o_j, double link_length,
                      const SimConfig& cfg, BranchTrace* bt) {
  if (!(o_j > 0.0 && o_j < link_length))
    throw std::runtime_error("midpoint_count: counter position outside (0, L)");
  const Tensor valid = indicator_ge(x_col, kValidThreshold);
  const Tensor hard = mul(indicator_ge(x_col, o_j), valid);
  if (bt) bt->note_pattern(hard.vals());
  const double s = 5.0 / link_length;
  Tensor soft = mul(sigmoid(scale(add_scalar(x_col, -o_j), s)), valid);
  return traced_graft(reduce_sum(hard, kAxisAll), reduce_sum(soft, kAxisAll),
                      cfg);
}

Tensor midpoint_count(const Tensor& x_col, double o_j, double link_length,
                      BranchTrace* bt) {
  return midpoint_count(x_col, o_j, link_length, SimConfig{}, bt);
}

CountSeries series_from_levels(const std::vector<std::vector<double>>& cum_per_step,
                               const std::vector<int>& link_ids, int interval_s,
                               double dt, int delta_n) {
  CountSeries out;
  out.link_ids = link_ids;
  out.interval_s = interval_s;
  const int T = static_cast<int>(cum_per_step.size());
  for (int t = 0; t < T; ++t) {
    const double elapsed = (t + 1) * dt;
    const double k = elapsed / interval_s;
    if (std::abs(k - std::round(k)) > 1e-9) continue;
    std::vector<double> row(link_ids.size());
    for (std::size_t p = 0; p < link_ids.size(); ++p)
      row[p] = cum_per_step[t][link_ids[p]] * delta_n;
    out.values.push_back(std::move(row));
  }
  return out;
}

std::pair<CountSeries, std::vector<int>> synthesize_observations(
    const CountSeries& truth, double noise_frac, double coverage,
    const RngStream& rng) {
  const RngStream noise = rng.fork(rng_lane::kObsNoise);
  const RngStream cover = rng.fork(rng_lane::kObsCoverage);

  // Seeded Fisher-Yates over positions, take the first floor(c * n).
  const int n = static_cast<int>(truth.link_ids.size());
  std::vector<int> pos(n);
  for (int i = 0; i < n; ++i) pos[i] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(cover.bits(static_cast<std::uint64_t>(i)) %
                                   static_cast<std::uint64_t>(i + 1));
    std::swap(pos[i], pos[j]);
  }
  const int m = static_cast<int>(std::floor(coverage * n));
  std::vector<int> chosen(pos.begin(), pos.begin() + m);
  std::sort(chosen.begin(), chosen.end());

  CountSeries obs;
  obs.interval_s = truth.interval_s;
  std::vector<int> observed_ids;
  observed_ids.reserve(chosen.size());
  for (int p : chosen) observed_ids.push_back(truth.link_ids[p]);
  obs.link_ids = observed_ids;
  obs.values.resize(truth.values.size());
  for (std::size_t k = 0; k < truth.values.size(); ++k) {
    obs.values[k].resize(chosen.size());
    for (std::size_t q = 0; q < chosen.size(); ++q) {
      const int p = chosen[q];
      const double eps = noise.uniform_in(-noise_frac, noise_frac,
                                          static_cast<std::uint64_t>(p),
                                          static_cast<std::uint64_t>(k));
      obs.values[k][q] = std::max(truth.values[k][p] * (1.0 + eps), 0.0);
    }
  }
  return {std::move(obs), std::move(observed_ids)};
}

}  // namespace dtsim
