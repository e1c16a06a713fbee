#include "dtsim/car_following.hpp"

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"

using namespace dtsim;
using dtsim_test::newell_reference_step;
using dtsim_test::rel_err;
using dtsim_test::trand;

namespace {

constexpr double kM = 99999.0;

Tensor vec(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor::from(std::move(v), {n, 1});
}

SimConfig cfg1() {
  SimConfig c;
  c.delta_n = 1;
  return c;
}

}  // namespace

TEST_CASE("headways") {
  CHECK(headways(vec({0, 10}), kM).vals() == std::vector<double>{10, kM});
  CHECK(headways(vec({5}), kM).vals() == std::vector<double>{kM});
  CHECK(headways(vec({-kM, 4, 9}), kM).vals() ==
        std::vector<double>{kM, 5, kM});
  // equal positions give a zero headway for the later-indexed agent
  CHECK(headways(vec({3, 3}), kM).vals() == std::vector<double>{kM, 0});
}

TEST_CASE("car following single step examples") {
  const SimConfig c = cfg1();
  auto step = [&](std::vector<double> x, double u, double kappa, double L) {
    return car_following_step(vec(std::move(x)), Tensor::scalar_of(u),
                              Tensor::scalar_of(kappa), L, c)
        .vals();
  };
  CHECK(step({0}, 15, 0.2, 100) == std::vector<double>{15});
  CHECK(step({0, 10}, 15, 0.2, 100) == std::vector<double>{5, 25});
  // too dense to move: congested branch clamps at zero
  CHECK(step({0, 2}, 15, 0.2, 100) == std::vector<double>{0, 17});
  // boundary cap
  CHECK(step({95}, 15, 0.2, 100) == std::vector<double>{100});
  // invalid agents never move
  CHECK(step({-kM, 50}, 15, 0.2, 100) == std::vector<double>{-kM, 65});
}

TEST_CASE("full state update") {
  const SimConfig c = cfg1();
  const Tensor u = vec({15, 20});
  const Tensor kappa = vec({0.2, 0.2});
  const std::vector<double> lengths = {100, 200};

  // an empty column stays untouched
  const Tensor X0 = Tensor::from({-kM, -kM}, {1, 2});
  CHECK(position_update_all(X0, u, kappa, lengths, c).vals() ==
        std::vector<double>{-kM, -kM});

  // two independent links evolve exactly like their isolated runs
  const Tensor X = Tensor::from({0.0, -kM, -kM, 30.0}, {2, 2});
  const Tensor X1 = position_update_all(X, u, kappa, lengths, c);
  const auto iso0 = car_following_step(vec({0, -kM}), Tensor::scalar_of(15),
                                       Tensor::scalar_of(0.2), 100, c);
  const auto iso1 = car_following_step(vec({-kM, 30}), Tensor::scalar_of(20),
                                       Tensor::scalar_of(0.2), 200, c);
  CHECK(X1.at(0, 0) == iso0.vals()[0]);
  CHECK(X1.at(1, 1) == iso1.vals()[1]);
}

TEST_CASE("tensorized update equals the scalar rule bit for bit") {
  for (int inst = 0; inst < 30; ++inst) {
    const int n = 1 + static_cast<int>(trand(50 + inst, 0, 0, 10));
    const double L = trand(50 + inst, 1, 80, 400);
    const double u = trand(50 + inst, 2, 13.9, 22.2);
    const double kappa = trand(50 + inst, 3, 0.18, 0.22);
    SimConfig c;
    c.delta_n = 1 + (inst % 4);
    std::vector<double> x(n);
    for (int i = 0; i < n; ++i)
      x[i] = trand(60 + inst, i, -0.005, L);  // includes near-zero positions

    std::vector<double> tens = x, ref = x;
    for (int t = 0; t < 10; ++t) {
      tens = car_following_step(vec(tens), Tensor::scalar_of(u),
                                Tensor::scalar_of(kappa), L, c)
                 .vals();
      ref = newell_reference_step(ref, u, kappa, L, c.delta_n, c.tau, kM);
      for (int i = 0; i < n; ++i)
        CHECK(std::abs(tens[i] - ref[i]) <= 1e-12);
    }
  }
}

TEST_CASE("kinematic properties over random instances") {
  for (int inst = 0; inst < 40; ++inst) {
    const int n = 2 + static_cast<int>(trand(200 + inst, 0, 0, 14));
    const double L = trand(200 + inst, 1, 50, 300);
    const double u = trand(200 + inst, 2, 13.9, 22.2);
    const double kappa = trand(200 + inst, 3, 0.18, 0.22);
    SimConfig c;
    c.delta_n = 1 + (inst % 3);
    const double jam = c.delta_n / kappa;

    std::vector<double> x(n);
    for (int i = 0; i < n; ++i)
      x[i] = i % 5 == 4 ? -kM : trand(210 + inst, i, 0, L);

    for (int t = 0; t < 8; ++t) {
      const Tensor h = headways(vec(x), kM);
      const auto next = car_following_step(vec(x), Tensor::scalar_of(u),
                                           Tensor::scalar_of(kappa), L, c)
                            .vals();
      std::vector<std::pair<double, int>> order_before, order_after;
      for (int i = 0; i < n; ++i) {
        if (x[i] < kValidThreshold) {
          CHECK(next[i] == x[i]);  // invalid entries are untouched
          continue;
        }
        CHECK(next[i] >= x[i]);        // no backward motion
        CHECK(next[i] >= 0.0);
        CHECK(next[i] <= L);           // boundary cap
        // congested-branch contract
        const double dx = next[i] - x[i];
        const double cong = std::max(h.vals()[i] - jam, 0.0);
        if (dx < u * c.dt() - 1e-12) CHECK(dx <= cong + 1e-12);
        order_before.push_back({x[i], i});
        order_after.push_back({next[i], i});
      }
      // followers never overtake: descending order of positions is kept
      std::stable_sort(order_before.begin(), order_before.end(),
                       [](auto a, auto b) { return a.first > b.first; });
      std::stable_sort(order_after.begin(), order_after.end(),
                       [](auto a, auto b) { return a.first > b.first; });
      for (std::size_t k = 0; k < order_before.size(); ++k)
        CHECK(order_before[k].second == order_after[k].second);
      x = next;
    }
  }
}

TEST_CASE("parameter gradients match finite differences") {
  // positions away from branch ties
  const std::vector<double> x = {5.0, 40.0, 90.0, -kM, 160.0};
  const double L = 250.0;
  SimConfig c;
  c.delta_n = 2;

  auto loss_at = [&](double u, double kappa) {
    const Tensor out =
        car_following_step(vec(x), Tensor::scalar_of(u),
                           Tensor::scalar_of(kappa), L, c);
    double s = 0.0;
    for (int i = 0; i < out.rows(); ++i)
      if (x[i] >= kValidThreshold) s += out.vals()[i] * (1.0 + 0.1 * i);
    return s;
  };

  const double u0 = 16.0, k0 = 0.2;
  Tape t;
  Tensor u = t.leaf({u0}, {1, 1});
  Tensor kappa = t.leaf({k0}, {1, 1});
  Tensor out = car_following_step(vec(x), u, kappa, L, c);
  std::vector<double> w(out.rows(), 0.0);
  for (int i = 0; i < out.rows(); ++i)
    if (x[i] >= kValidThreshold) w[i] = 1.0 + 0.1 * i;
  Tensor loss =
      reduce_sum(mul(out, Tensor::from(w, {out.rows(), 1})), kAxisAll);
  GradMap g = t.backward(loss);

  const double h = 1e-6;
  const double fd_u = (loss_at(u0 + h, k0) - loss_at(u0 - h, k0)) / (2 * h);
  const double fd_k = (loss_at(u0, k0 + h) - loss_at(u0, k0 - h)) / (2 * h);
  CHECK(rel_err(g.of(u)[0], fd_u, 1e-9) < 1e-5);
  CHECK(rel_err(g.of(kappa)[0], fd_k, 1e-9) < 1e-5);
}

TEST_CASE("branch trace flags differing control paths") {
  SimConfig c = cfg1();
  BranchTrace a, b;
  car_following_step(vec({0, 10}), Tensor::scalar_of(15),
                     Tensor::scalar_of(0.2), 100, c, &a);
  car_following_step(vec({0, 10}), Tensor::scalar_of(15),
                     Tensor::scalar_of(0.2), 100, c, &b);
  CHECK(a.h == b.h);
  BranchTrace d;
  car_following_step(vec({0, 3}), Tensor::scalar_of(15),
                     Tensor::scalar_of(0.2), 100, c, &d);  // congested founder
  CHECK(a.h != d.h);
}
