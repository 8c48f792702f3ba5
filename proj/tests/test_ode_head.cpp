#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "trisk/error.hpp"
#include "trisk/ode_head.hpp"

using namespace trisk;

namespace {

struct Head {
  ParameterSet params;
  HeadSlots slots;
  HeadConfig config;

  Head(int latent_dim, HeadConfig cfg, std::uint64_t seed, double init_std = 0.5) : config(cfg) {
    Rng rng(seed);
    slots = add_head_parameters(params, latent_dim, cfg, rng, init_std);
    params[slots.hidden_b].value.setConstant(0.1);
  }
  OdeHead head() const { return OdeHead(params, slots, config); }
};

Vector random_latent(int n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Vector z(n);
  for (auto& v : z) v = u(gen);
  return z;
}

}  // namespace

TEST_CASE("constant rate has the closed-form solution") {
  const auto curve = integrate_rk4([](double, double) { return 0.5; }, 48, 4);
  CHECK(curve.cum_hazard[0] == 0.0);
  CHECK(std::abs(curve.cum_hazard[2] - 1.0) < 1e-12);
  CHECK(std::abs(curve.survival(2) - std::exp(-1.0)) < 1e-9);
  CHECK(std::abs(survival_at(curve, 2.0) - 0.367879441171) < 1e-9);
}

TEST_CASE("affine rate against e - 1 at one month") {
  // One RK4 step multiplies 1 + L by the degree-4 Taylor polynomial of e^h,
  // so four quarter-month steps land at T(1/4)^4 - 1, about 7.2e-5 below
  // e - 1. Finer steps close the gap at fourth order.
  const double h = 0.25;
  const double taylor = 1.0 + h + h * h / 2 + h * h * h / 6 + h * h * h * h / 24;
  const auto curve = integrate_rk4([](double y, double) { return y + 1.0; }, 2, 4);
  CHECK(std::abs(curve.cum_hazard[1] - (std::pow(taylor, 4) - 1.0)) < 1e-14);
  CHECK(std::abs(curve.cum_hazard[1] - (std::exp(1.0) - 1.0)) < 1e-4);
  const auto fine = integrate_rk4([](double y, double) { return y + 1.0; }, 2, 16);
  CHECK(std::abs(fine.cum_hazard[1] - (std::exp(1.0) - 1.0)) < 1e-6);
}

TEST_CASE("non-finite stages raise ODE divergence") {
  auto bad = [](double, double t) { return t > 3.0 ? std::numeric_limits<double>::infinity() : 0.1; };
  CHECK_THROWS_WITH_AS(integrate_rk4(bad, 48, 4), "ODE divergence", NumericalError);
  auto blowup = [](double y, double) { return std::exp(y); };
  CHECK_THROWS_AS(integrate_rk4(blowup, 48, 4), NumericalError);
}

TEST_CASE("halving the step barely moves the horizon value") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    HeadConfig coarse;
    coarse.hidden = 32;
    HeadConfig fine = coarse;
    fine.substeps_per_month = 8;
    Head a(10, coarse, seed), b(10, fine, seed);
    const Vector z = random_latent(10, seed);
    const double l4 = a.head().integrate(z).curve.cum_hazard.back();
    const double l8 = b.head().integrate(z).curve.cum_hazard.back();
    CHECK(std::abs(l4 - l8) / std::abs(l8) < 1e-5);
  }
}

TEST_CASE("survival_at and risk_at") {
  SurvivalCurve linear;
  for (int k = 0; k <= 48; ++k) linear.cum_hazard.push_back(0.5 * k);
  CHECK(survival_at(linear, 0.0) == 1.0);
  CHECK(risk_at(linear, 0.0) == 0.0);
  CHECK(std::abs(survival_at(linear, 2.0) - std::exp(-1.0)) < 1e-15);

  SurvivalCurve curved;
  for (int k = 0; k <= 48; ++k) curved.cum_hazard.push_back(0.01 * k * k);
  CHECK(survival_at(curved, 1.5) == doctest::Approx(std::exp(-(0.01 + 0.04) / 2)).epsilon(1e-15));
  for (int k = 0; k <= 48; ++k) CHECK(survival_at(curved, k) == std::exp(-curved.cum_hazard[static_cast<std::size_t>(k)]));

  SurvivalCurve s36;
  s36.cum_hazard.assign(49, 0.0);
  s36.cum_hazard[36] = -std::log(0.3);
  CHECK(risk_at(s36, 36.0) == doctest::Approx(0.7).epsilon(1e-14));

  CHECK_THROWS_AS(survival_at(linear, -0.1), UsageError);
  CHECK_THROWS_AS(survival_at(linear, 48.01), UsageError);
  CHECK_THROWS_AS(risk_at(linear, 49.0), UsageError);
}

TEST_CASE("risk is monotone in time on random head curves") {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> t(0.0, 48.0);
  HeadConfig cfg;
  cfg.hidden = 8;
  for (int c = 0; c < 100; ++c) {
    Head h(6, cfg, 100 + static_cast<std::uint64_t>(c), 1.0);
    const auto curve = h.head().integrate(random_latent(6, static_cast<std::uint64_t>(c))).curve;
    REQUIRE(curve.cum_hazard.size() == 49);
    CHECK(curve.cum_hazard[0] == 0.0);
    for (int k = 1; k <= 48; ++k) {
      CHECK(curve.cum_hazard[static_cast<std::size_t>(k)] >= curve.cum_hazard[static_cast<std::size_t>(k - 1)]);
      CHECK(curve.survival(k) <= 1.0);
      CHECK(curve.survival(k) > 0.0);
    }
    double a = t(gen), b = t(gen);
    if (a > b) std::swap(a, b);
    CHECK(risk_at(curve, b) >= risk_at(curve, a));
  }
}

TEST_CASE("softplus output is positive and invertible") {
  for (double x : {-40.0, -5.0, 0.0, 3.0, 50.0}) {
    CHECK(softplus(x) > 0.0);
  }
  for (double y : {1e-4, 0.01, 1.0, 20.0, 60.0}) CHECK(softplus(inverse_softplus(y)) == doctest::Approx(y).epsilon(1e-12));
  HeadConfig cfg;
  Head h(4, cfg, 1);
  h.params[h.slots.out_w].value.setZero();
  const auto curve = h.head().integrate(random_latent(4, 1)).curve;
  CHECK(curve.cum_hazard[10] == doctest::Approx(0.1).epsilon(1e-12));  // initial_hazard 0.01 per month
}

TEST_CASE("raising the output bias raises the cumulative hazard everywhere") {
  HeadConfig cfg;
  Head h(6, cfg, 4);
  h.params[h.slots.out_w].value = h.params[h.slots.out_w].value.cwiseAbs();
  const Vector z = random_latent(6, 4);
  const auto base = h.head().integrate(z).curve;
  h.params[h.slots.out_b].value(0, 0) += 0.3;
  const auto up = h.head().integrate(z).curve;
  for (int k = 1; k <= 48; ++k) CHECK(up.cum_hazard[static_cast<std::size_t>(k)] > base.cum_hazard[static_cast<std::size_t>(k)]);
}

TEST_CASE("event point interpolates the grid") {
  HeadConfig cfg;
  Head h(6, cfg, 5);
  const auto head = h.head();
  const auto trace = head.integrate(random_latent(6, 5));
  const auto p = head.event_point(trace, 10.25);
  CHECK(p.lower == 10);
  CHECK(p.weight == doctest::Approx(0.25));
  CHECK(p.cum_hazard == doctest::Approx(cumulative_hazard_at(trace.curve, 10.25)).epsilon(1e-14));
  CHECK(p.rate == doctest::Approx(head.rate(trace.latent_term, p.cum_hazard, 10.25)).epsilon(1e-14));
  const auto end = head.event_point(trace, 48.0);
  CHECK(end.cum_hazard == doctest::Approx(trace.curve.cum_hazard.back()).epsilon(1e-14));
  const auto step = head.event_point(trace, 10.75, false);
  CHECK(step.cum_hazard == trace.curve.cum_hazard[10]);
}

TEST_CASE("gradient of the horizon cumulative hazard matches central differences") {
  for (bool feed_back : {true, false}) {
    HeadConfig cfg;
    cfg.hidden = 8;
    cfg.use_cumhaz_input = feed_back;
    Head h(6, cfg, 6, 0.7);
    const Vector z = random_latent(6, 6);
    const auto head = h.head();
    const auto trace = head.integrate(z);
    HeadSeeds seeds;
    seeds.grid.assign(49, 0.0);
    seeds.grid[48] = 1.0;
    seeds.grid[17] = 0.5;
    // Also seed an event term so that path is exercised.
    const auto ev = head.event_point(trace, 20.6);
    seeds.event_cum_hazard = 0.3;
    seeds.event_rate = -2.0;
    Gradients grads = h.params.zeros_like();
    const Vector dz = head.backward(trace, &ev, seeds, &grads);

    auto objective = [&](const Vector& zz) {
      const auto hd = h.head();
      const auto tr = hd.integrate(zz);
      const auto e = hd.event_point(tr, 20.6);
      return tr.curve.cum_hazard[48] + 0.5 * tr.curve.cum_hazard[17] + 0.3 * e.cum_hazard - 2.0 * e.rate;
    };
    const double step = 1e-6;
    std::vector<double> analytic, numeric;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      Vector up = z, down = z;
      up[i] += step;
      down[i] -= step;
      analytic.push_back(dz[i]);
      numeric.push_back((objective(up) - objective(down)) / (2 * step));
    }
    CHECK(oracle::relative_error(analytic, numeric) < 1e-4);

    for (std::size_t k = 0; k < h.params.size(); ++k) {
      if (!feed_back && k == h.slots.cumhaz_w) continue;
      auto& v = h.params[k].value;
      std::vector<double> a, n;
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        const double saved = v.data()[i];
        v.data()[i] = saved + step;
        const double f_up = objective(z);
        v.data()[i] = saved - step;
        const double f_down = objective(z);
        v.data()[i] = saved;
        a.push_back(grads[k].data()[i]);
        n.push_back((f_up - f_down) / (2 * step));
      }
      INFO(h.params[k].name);
      CHECK(oracle::relative_error(a, n) < 1e-4);
    }
  }
}
