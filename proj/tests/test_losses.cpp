#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "trisk/error.hpp"
#include "trisk/losses.hpp"

using namespace trisk;

namespace {

SurvivalCurve constant_curve(double rate) {
  SurvivalCurve c;
  for (int k = 0; k <= 48; ++k) c.cum_hazard.push_back(rate * k);
  return c;
}

std::vector<PitValue> random_pit(std::mt19937_64& gen, int n, double censor_fraction) {
  std::uniform_real_distribution<double> u(1e-3, 1.0);
  std::bernoulli_distribution censored(censor_fraction);
  std::vector<PitValue> out;
  for (int i = 0; i < n; ++i) out.push_back({u(gen), censored(gen) ? 0 : 1});
  return out;
}

double oracle_stat(const std::vector<PitValue>& v, int bins) {
  std::vector<double> u;
  std::vector<int> e;
  for (const auto& p : v) {
    u.push_back(p.u);
    e.push_back(p.event_indicator);
  }
  return oracle::hard_dcal(u, e, bins);
}

}  // namespace

TEST_CASE("nll examples") {
  const auto curve = constant_curve(1.0);
  CHECK(nll(curve, 1.0, 1.0, 1) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(nll(curve, 1.0, 2.0, 0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(nll(curve, 1.0, 1.5, 0) == doctest::Approx(1.5).epsilon(1e-15));
  CHECK_THROWS_AS(nll(std::nan(""), 1.0, 0), NumericalError);
  CHECK_THROWS_AS(nll(1.0, 0.0, 1), NumericalError);
}

TEST_CASE("scaling a constant hazard shifts the event nll by -log c + (c - 1) L") {
  const double rate = 0.03, t = 17.25;
  const auto base = constant_curve(rate);
  const double l = rate * t;
  for (double c : {0.2, 0.5, 1.0, 3.0, 7.5}) {
    const auto scaled = constant_curve(c * rate);
    const double delta = nll(scaled, c * rate, t, 1) - nll(base, rate, t, 1);
    CHECK(delta == doctest::Approx(-std::log(c) + (c - 1.0) * l).epsilon(1e-12));
  }
}

TEST_CASE("constant-hazard nll minimiser is events over exposure") {
  std::mt19937_64 gen(17);
  std::exponential_distribution<double> event(0.02), censor(0.01);
  std::vector<double> time;
  std::vector<int> delta;
  double events = 0.0, exposure = 0.0;
  for (int i = 0; i < 3000; ++i) {
    const double te = event(gen), tc = std::min(censor(gen), 48.0);
    time.push_back(std::min(te, tc));
    delta.push_back(te <= tc ? 1 : 0);
    events += delta.back();
    exposure += time.back();
  }
  auto neg_mean_nll = [&](double rate) {
    const auto curve = constant_curve(rate);
    double total = 0.0;
    for (std::size_t i = 0; i < time.size(); ++i) total += nll(curve, rate, time[i], delta[i]);
    return -total / static_cast<double>(time.size());
  };
  const double fitted = oracle::golden_max(neg_mean_nll, 1e-4, 0.2, 1e-9);
  CHECK(std::abs(fitted - events / exposure) < 1e-3);
  CHECK(std::abs(fitted - events / exposure) / (events / exposure) < 1e-4);
}

TEST_CASE("uniform PIT at bin centres is calibrated") {
  std::vector<PitValue> v;
  for (int rep = 0; rep < 7; ++rep)
    for (int b = 0; b < 10; ++b) v.push_back({(b + 0.5) / 10.0, 1});
  LossConfig cfg;
  CHECK(xcal(v, cfg).value < 1e-6);
}

TEST_CASE("everything in one bin approaches 1 - 1/B") {
  std::vector<PitValue> v(50, PitValue{0.55, 1});
  LossConfig cfg;
  cfg.soft_bin_temperature = 1e6;
  CHECK(xcal(v, cfg).value == doctest::Approx(0.9).epsilon(1e-9));
  CHECK(hard_dcalibration(v, 10) == doctest::Approx(0.9).epsilon(1e-12));
}

TEST_CASE("sharp soft binning agrees with the hard-binned oracle") {
  std::mt19937_64 gen(23);
  for (double censor_fraction : {0.0, 0.3, 0.8}) {
    for (int bins : {5, 10, 20}) {
      const auto v = random_pit(gen, 400, censor_fraction);
      LossConfig cfg;
      cfg.dcal_bins = bins;
      cfg.soft_bin_temperature = 1e6;
      const double oracle_value = oracle_stat(v, bins);
      CHECK(std::abs(xcal(v, cfg).value - oracle_value) < 1e-4);
      CHECK(hard_dcalibration(v, bins) == doctest::Approx(oracle_value).epsilon(1e-12));
    }
  }
}

TEST_CASE("xcal is non-negative and its gradient matches central differences") {
  std::mt19937_64 gen(29);
  for (int trial = 0; trial < 50; ++trial) {
    auto v = random_pit(gen, 30, 0.4);
    LossConfig cfg;
    cfg.soft_bin_temperature = 40.0;
    const auto r = xcal(v, cfg);
    CHECK(r.value >= 0.0);
    if (trial % 10 != 0) continue;
    std::vector<double> numeric;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i].u;
      const double h = std::min({1e-6, saved / 2, (1.0 - saved) / 2});
      v[i].u = saved + h;
      const double up = xcal(v, cfg).value;
      v[i].u = saved - h;
      const double down = xcal(v, cfg).value;
      v[i].u = saved;
      numeric.push_back((up - down) / (2 * h));
    }
    CHECK(oracle::relative_error(r.grad_u, numeric) < 1e-5);
  }
}

TEST_CASE("one gradient step on per-subject offsets lowers a miscalibrated statistic") {
  std::mt19937_64 gen(31);
  std::uniform_real_distribution<double> clustered(0.35, 0.65);
  std::vector<PitValue> v;
  for (int i = 0; i < 200; ++i) v.push_back({clustered(gen), i % 4 == 0 ? 0 : 1});
  LossConfig cfg;
  cfg.soft_bin_temperature = 30.0;
  const auto before = xcal(v, cfg);
  REQUIRE(before.value > 0.05);
  auto stepped = v;
  const double lr = 2.0;
  for (std::size_t i = 0; i < v.size(); ++i)
    stepped[i].u = std::clamp(v[i].u - lr * before.grad_u[i], 0.0, 1.0);
  CHECK(xcal(stepped, cfg).value < before.value);
}

TEST_CASE("empty batches and bad inputs are rejected") {
  LossConfig cfg;
  CHECK_THROWS_WITH_AS(xcal(std::vector<PitValue>{}, cfg), "no subjects", UsageError);
  CHECK_THROWS_AS(total_loss(std::vector<SubjectOutputs>{}, cfg), UsageError);
  CHECK_THROWS_AS(xcal(std::vector<PitValue>{{1.5, 1}}, cfg), UsageError);
  cfg.dcal_bins = 1;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg = LossConfig{};
  cfg.lambda_xcal = -1.0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
}

TEST_CASE("total loss") {
  std::mt19937_64 gen(37);
  std::uniform_real_distribution<double> l(0.01, 2.0), rate(0.005, 0.2);
  std::vector<SubjectOutputs> batch;
  for (int i = 0; i < 40; ++i) batch.push_back({l(gen), rate(gen), i % 3 == 0 ? 0 : 1});

  SUBCASE("lambda 2 is the default") { CHECK(LossConfig{}.lambda_xcal == 2.0); }

  SUBCASE("lambda 0 reduces to the mean nll") {
    LossConfig cfg;
    cfg.lambda_xcal = 0.0;
    double mean = 0.0;
    for (const auto& s : batch) mean += s.event_indicator ? -std::log(s.rate) + s.cum_hazard : s.cum_hazard;
    mean /= static_cast<double>(batch.size());
    const auto out = total_loss(batch, cfg);
    CHECK(out.total == doctest::Approx(mean).epsilon(1e-14));
    CHECK(out.xcal == 0.0);
  }

  SUBCASE("total is nll plus lambda times xcal") {
    LossConfig cfg;
    const auto out = total_loss(batch, cfg);
    std::vector<PitValue> pit;
    for (const auto& s : batch) pit.push_back({std::exp(-s.cum_hazard), s.event_indicator});
    CHECK(out.total == doctest::Approx(out.mean_nll + 2.0 * xcal(pit, cfg).value).epsilon(1e-14));
  }

  SUBCASE("gradients in L and rate match central differences") {
    for (double gamma : {50.0, 1000.0}) {
      LossConfig cfg;
      cfg.soft_bin_temperature = gamma;
      const auto out = total_loss(batch, cfg);
      std::vector<double> analytic, numeric;
      const double h = 1e-7;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        auto up = batch, down = batch;
        up[i].cum_hazard += h;
        down[i].cum_hazard -= h;
        analytic.push_back(out.d_cum_hazard[i]);
        numeric.push_back((total_loss(up, cfg).total - total_loss(down, cfg).total) / (2 * h));
        up = batch;
        down = batch;
        up[i].rate += h * batch[i].rate;
        down[i].rate -= h * batch[i].rate;
        analytic.push_back(out.d_rate[i]);
        numeric.push_back((total_loss(up, cfg).total - total_loss(down, cfg).total) / (2 * h * batch[i].rate));
      }
      INFO("gamma " << gamma);
      CHECK(oracle::relative_error(analytic, numeric) < 1e-4);
    }
  }

  SUBCASE("summation order is fixed") {
    LossConfig cfg;
    CHECK(total_loss(batch, cfg).total == total_loss(batch, cfg).total);
  }
}
