#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "test_util.hpp"
#include "trisk/cph.hpp"
#include "trisk/error.hpp"

using namespace trisk;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Survival {
  MatrixXd x;
  std::vector<double> time;
  std::vector<int> event;
};

// Exponential times with hazard 0.02 exp(x . beta), censoring at rate 0.01
// and administratively at 48 months. Columns alternate binary and normal.
Survival simulate(int n, const VectorXd& beta, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal;
  std::bernoulli_distribution coin(0.5);
  std::exponential_distribution<double> unit(1.0);
  Survival s;
  s.x.resize(n, beta.size());
  for (int i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < beta.size(); ++j) s.x(i, j) = j % 2 == 0 ? (coin(gen) ? 1.0 : 0.0) : normal(gen);
    const double t = unit(gen) / (0.02 * std::exp(s.x.row(i).dot(beta)));
    const double c = std::min(unit(gen) / 0.01, 48.0);
    s.time.push_back(std::min(t, c));
    s.event.push_back(t <= c ? 1 : 0);
  }
  return s;
}

// Breslow score by direct risk-set sums.
VectorXd direct_score(const MatrixXd& x, const std::vector<double>& time, const std::vector<int>& event,
                      const VectorXd& beta) {
  VectorXd score = VectorXd::Zero(x.cols());
  for (std::size_t i = 0; i < time.size(); ++i) {
    if (event[i] != 1) continue;
    double denom = 0.0;
    VectorXd num = VectorXd::Zero(x.cols());
    for (std::size_t j = 0; j < time.size(); ++j) {
      if (time[j] < time[i]) continue;
      const double w = std::exp(x.row(static_cast<Eigen::Index>(j)).dot(beta));
      denom += w;
      num += w * x.row(static_cast<Eigen::Index>(j)).transpose();
    }
    score += x.row(static_cast<Eigen::Index>(i)).transpose() - num / denom;
  }
  return score;
}

}  // namespace

TEST_CASE("recovers a hazard ratio of two") {
  VectorXd beta(1);
  beta << std::log(2.0);
  const auto s = simulate(5000, beta, 3);
  const auto m = cph_fit(s.x, s.time, s.event);
  // Standard error from the curvature of the oracle log-likelihood.
  const double h = 1e-3;
  auto ll = [&](double b) { return oracle::breslow_loglik(s.x, s.time, s.event, VectorXd::Constant(1, b)); };
  const double b0 = m.beta(0);
  const double curvature = (ll(b0 + h) - 2 * ll(b0) + ll(b0 - h)) / (h * h);
  const double se = 1.0 / std::sqrt(-curvature);
  CHECK(se > 0.02);
  CHECK(se < 0.06);
  CHECK(std::abs(b0 - std::log(2.0)) < 3 * se);
}

TEST_CASE("fitted score vanishes and the likelihood matches the oracle") {
  VectorXd beta(3);
  beta << 0.7, -0.4, 0.3;
  const auto s = simulate(500, beta, 5);
  const auto m = cph_fit(s.x, s.time, s.event);
  const VectorXd score = direct_score(s.x, s.time, s.event, m.beta);
  CHECK(score.cwiseAbs().maxCoeff() < 1e-6);
  CHECK(partial_log_likelihood(s.x, s.time, s.event, m.beta) ==
        doctest::Approx(oracle::breslow_loglik(s.x, s.time, s.event, m.beta)).epsilon(1e-12));
  CHECK(m.log_likelihood == doctest::Approx(oracle::breslow_loglik(s.x, s.time, s.event, m.beta)).epsilon(1e-10));
}

TEST_CASE("Newton matches a direct coordinate-ascent optimiser") {
  VectorXd beta(2);
  beta << 0.5, 0.8;
  auto s = simulate(200, beta, 7);
  for (auto& t : s.time) t = std::ceil(t);  // Breslow ties
  const auto m = cph_fit(s.x, s.time, s.event);
  auto f = [&](const VectorXd& b) { return oracle::breslow_loglik(s.x, s.time, s.event, b); };
  const VectorXd direct = oracle::coordinate_ascent(f, VectorXd::Zero(2), 3.0, 200, 1e-9);
  CHECK((m.beta - direct).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("shifting a covariate leaves the fit unchanged") {
  VectorXd beta(2);
  beta << 0.6, 0.2;
  const auto s = simulate(400, beta, 9);
  const auto a = cph_fit(s.x, s.time, s.event);
  MatrixXd shifted = s.x;
  shifted.col(1).array() += 37.5;
  const auto b = cph_fit(shifted, s.time, s.event);
  CHECK((a.beta - b.beta).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(partial_log_likelihood(s.x, s.time, s.event, a.beta) ==
        doctest::Approx(partial_log_likelihood(shifted, s.time, s.event, a.beta)).epsilon(1e-10));
}

TEST_CASE("null model baseline is Nelson-Aalen") {
  VectorXd none(0);
  auto s = simulate(300, none, 11);
  for (auto& t : s.time) t = std::round(t);
  const auto m = cph_fit(s.x, s.time, s.event);
  CHECK(m.beta.size() == 0);
  for (double t : {0.0, 1.0, 6.0, 12.5, 30.0, 48.0})
    CHECK(m.cumulative_baseline(t) == doctest::Approx(oracle::nelson_aalen(s.time, s.event, t)).epsilon(1e-12));
  for (std::size_t k = 1; k < m.baseline_cumhaz.size(); ++k) CHECK(m.baseline_cumhaz[k] >= m.baseline_cumhaz[k - 1]);
}

TEST_CASE("degenerate designs are rejected") {
  VectorXd beta(2);
  beta << 0.3, 0.3;
  auto s = simulate(100, beta, 13);
  SUBCASE("zero column") {
    s.x.col(1).setZero();
    CHECK_THROWS_WITH_AS(cph_fit(s.x, s.time, s.event, {"a", "b"}),
                         "singular information matrix: collinear or constant columns b", DataError);
  }
  SUBCASE("duplicated column") {
    MatrixXd dup(s.x.rows(), 3);
    dup << s.x, s.x.col(0);
    CHECK_THROWS_AS(cph_fit(dup, s.time, s.event), DataError);
  }
  SUBCASE("no events") {
    std::fill(s.event.begin(), s.event.end(), 0);
    CHECK_THROWS_AS(cph_fit(s.x, s.time, s.event), DataError);
  }
  SUBCASE("iteration cap") {
    CphOptions opts;
    opts.max_iterations = 0;
    CHECK_THROWS_AS(cph_fit(s.x, s.time, s.event, {}, opts), NumericalError);
  }
}

TEST_CASE("prediction") {
  VectorXd beta(3);
  beta << 0.9, 0.4, -0.5;
  const auto s = simulate(600, beta, 17);
  const auto m = cph_fit(s.x, s.time, s.event);

  CHECK(cph_predict(m, m.means, 36.0) == doctest::Approx(1.0 - std::exp(-m.cumulative_baseline(36.0))).epsilon(1e-14));
  CHECK(cph_predict(m, m.means, 0.0) == 0.0);
  CHECK_THROWS_AS(cph_predict(m, VectorXd::Zero(2), 36.0), UsageError);

  CphModel flat = m;
  flat.beta.setZero();
  std::mt19937_64 gen(1);
  std::normal_distribution<double> normal;
  const double r0 = cph_predict(flat, VectorXd::Zero(3), 36.0);
  for (int k = 0; k < 20; ++k) {
    VectorXd row(3);
    for (auto& v : row) v = normal(gen);
    CHECK(cph_predict(flat, row, 36.0) == doctest::Approx(r0).epsilon(1e-14));
  }

  REQUIRE(m.beta(0) > 0.0);
  REQUIRE(m.beta(1) > 0.0);
  for (int k = 0; k < 200; ++k) {
    VectorXd row(3);
    for (auto& v : row) v = normal(gen);
    for (Eigen::Index j : {0, 1}) {
      VectorXd up = row;
      up(j) += std::abs(normal(gen)) + 1e-3;
      CHECK(cph_predict(m, up, 36.0) > cph_predict(m, row, 36.0));
    }
  }
}

TEST_CASE("design files, specs and model files") {
  testutil::TempDir dir("cph");
  testutil::spit(dir / "d.csv",
                 "patient_id,age,sex_male,nyha,time,event\n"
                 "a,60,1,II,10,1\n"
                 "b,70,0,III,20,0\n"
                 "c,55,1,I,5,1\n"
                 "d,80,0,II,30,1\n"
                 "e,65,1,III,12,0\n"
                 "f,72,0,I,8,1\n");
  const auto table = read_design(dir / "d.csv");
  CHECK(table.rows() == 6);
  CHECK(table.ids.front() == "a");
  CHECK(table.times[1] == 20.0);
  CHECK(table.events[1] == 0);

  const auto inferred = infer_spec(table);
  REQUIRE(inferred.covariates.size() == 3);
  CHECK(inferred.covariates[1].type == CovariateType::binary);

  testutil::spit(dir / "spec.txt",
                 "# MAGGIC-style roles\n"
                 "age continuous\n"
                 "sex_male binary\n"
                 "nyha categorical II\n"
                 "interaction age sex_male\n");
  auto spec = read_spec(dir / "spec.txt");
  const auto design = expand(spec, table);
  CHECK(design.names == std::vector<std::string>{"age", "sex_male", "nyha=I", "nyha=III", "age:sex_male"});
  CHECK(design.x(0, 4) == 60.0);
  CHECK(design.x(1, 4) == 0.0);
  CHECK(design.x(2, 2) == 1.0);
  CHECK(design.x(0, 2) == 0.0);
  CHECK(design.x(0, 3) == 0.0);

  VectorXd beta(2);
  beta << 0.5, 0.1;
  const auto s = simulate(200, beta, 19);
  const auto m = cph_fit(s.x, s.time, s.event, {"flag", "score"});
  CovariateSpec two;
  two.covariates = {{"flag", CovariateType::binary, "", {}}, {"score", CovariateType::continuous, "", {}}};
  save_cph(dir / "m.txt", m, two);
  CovariateSpec back_spec;
  const auto back = load_cph(dir / "m.txt", &back_spec);
  CHECK(back.names == m.names);
  CHECK(back.beta == m.beta);
  CHECK(back.means == m.means);
  CHECK(back.baseline_times == m.baseline_times);
  CHECK(back.baseline_cumhaz == m.baseline_cumhaz);
  CHECK(back_spec.covariates.size() == 2);

  testutil::spit(dir / "bad.csv", "age,time,event\n60,10,2\n");
  CHECK_THROWS_AS(read_design(dir / "bad.csv"), DataError);
  CovariateSpec undeclared;
  undeclared.covariates = {{"age", CovariateType::continuous, "", {}}};
  undeclared.interactions = {{"age", "bmi"}};
  CHECK_THROWS_AS(undeclared.validate(), UsageError);
}
