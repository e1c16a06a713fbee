#include "dtsim/observation.hpp"

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"

using namespace dtsim;

namespace {

constexpr double kM = 99999.0;

Tensor vec(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor::from(std::move(v), {n, 1});
}

}  // namespace

TEST_CASE("midpoint count forward values") {
  CHECK(midpoint_count(vec({10}), 5, 15).scalar() == 1.0);
  CHECK(midpoint_count(vec({3}), 5, 15).scalar() == 0.0);
  CHECK(midpoint_count(vec({-kM, -kM}), 5, 15).scalar() == 0.0);
  CHECK(midpoint_count(vec({10, 3, -kM, 5}), 5, 15).scalar() == 2.0);
  CHECK_THROWS(midpoint_count(vec({1}), 0.0, 15));
  CHECK_THROWS(midpoint_count(vec({1}), 15.0, 15));

  // the forward value is an exact integer whatever the slope
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> x(12);
    int expect = 0;
    for (int i = 0; i < 12; ++i) {
      x[i] = i % 3 == 2 ? -kM : dtsim_test::trand(400 + trial, i, 0.0, 200.0);
      if (x[i] >= 100.0 && x[i] != -kM) ++expect;
    }
    CHECK(midpoint_count(vec(x), 100.0, 200.0).scalar() ==
          static_cast<double>(expect));
  }
}

TEST_CASE("midpoint count gradient") {
  // at the counter, d count / d x = sigmoid'(0) * s = 0.25 * (5 / 15)
  Tape t;
  Tensor x = t.leaf({5.0}, {1, 1});
  Tensor q = midpoint_count(x, 5.0, 15.0);
  GradMap g = t.backward(q);
  CHECK(g.of(x)[0] == doctest::Approx(0.25 / 3.0).epsilon(1e-12));

  // every valid agent feels a strictly positive pull across the counter
  Tape t2;
  Tensor x2 = t2.leaf({1.0, 7.0, 14.0}, {3, 1});
  GradMap g2 = t2.backward(midpoint_count(x2, 7.5, 15.0));
  for (double v : g2.of(x2)) CHECK(v > 0.0);

  // invalid agents contribute nothing
  Tape t3;
  Tensor x3 = t3.leaf({-kM, -kM}, {2, 1});
  GradMap g3 = t3.backward(midpoint_count(x3, 5.0, 15.0));
  CHECK(g3.of(x3) == std::vector<double>{0, 0});
}

TEST_CASE("series assembly from per-step levels") {
  // one agent crossing once: the cumulative series steps up and stays
  std::vector<std::vector<double>> levels;
  for (int t = 0; t < 12; ++t)
    levels.push_back({t >= 4 ? 1.0 : 0.0, 0.0});
  const CountSeries s = series_from_levels(levels, {0, 1}, 3, 1.0, 4);
  CHECK(s.n_intervals() == 4);
  CHECK(s.values[0] == std::vector<double>{0, 0});
  CHECK(s.values[1] == std::vector<double>{4, 0});  // scaled to vehicles
  CHECK(s.values[2] == std::vector<double>{4, 0});
  CHECK(s.values[3] == std::vector<double>{4, 0});

  // 30 simulated minutes at a 5-minute cadence gives six samples
  std::vector<std::vector<double>> half_hour(1800, {0.0});
  CHECK(series_from_levels(half_hour, {0}, 300, 1.0, 1).n_intervals() == 6);

  // cumulative monotonicity per link
  for (int k = 1; k < s.n_intervals(); ++k)
    for (std::size_t p = 0; p < s.link_ids.size(); ++p)
      CHECK(s.values[k][p] >= s.values[k - 1][p]);
}

TEST_CASE("observation synthesis") {
  CountSeries truth;
  truth.link_ids = {0, 1, 2, 3, 4};
  truth.interval_s = 300;
  truth.values = {{10, 0, 5, 8, 2}, {20, 1, 9, 8, 4}};

  // zero noise and full coverage reproduce the input
  const auto [full, ids] =
      synthesize_observations(truth, 0.0, 1.0, RngStream(5));
  CHECK(ids == truth.link_ids);
  CHECK(full.values == truth.values);

  // 80% coverage on five links keeps floor(0.8 * 5) = 4
  const auto [obs, ids2] =
      synthesize_observations(truth, 0.10, 0.80, RngStream(5));
  CHECK(ids2.size() == 4);
  CHECK(obs.link_ids == ids2);
  for (std::size_t q = 1; q < ids2.size(); ++q) CHECK(ids2[q] > ids2[q - 1]);

  // multiplicative bound and non-negativity
  for (int k = 0; k < obs.n_intervals(); ++k)
    for (std::size_t q = 0; q < ids2.size(); ++q) {
      const double v = truth.values[k][ids2[q]];
      CHECK(obs.values[k][q] >= 0.9 * v - 1e-12);
      CHECK(obs.values[k][q] <= 1.1 * v + 1e-12);
    }

  // determinism
  const auto [obs2, ids3] =
      synthesize_observations(truth, 0.10, 0.80, RngStream(5));
  CHECK(obs2.values == obs.values);
  CHECK(ids3 == ids2);
  const auto [obs3, ids4] =
      synthesize_observations(truth, 0.10, 0.80, RngStream(6));
  CHECK((obs3.values != obs.values || ids4 != ids2));
}
