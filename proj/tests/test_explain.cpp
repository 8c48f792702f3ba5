#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "test_util.hpp"
#include "trisk/error.hpp"
#include "trisk/explain.hpp"

using namespace trisk;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden_size = 12;
  c.n_heads = 3;
  c.intermediate_size = 10;
  c.pooler_size = 8;
  c.max_seq_len = 64;
  c.init_std = 0.3;
  return c;
}

HeadConfig small_head() {
  HeadConfig h;
  h.hidden = 6;
  return h;
}

const std::vector<std::string> kPool = {"D10", "D11", "D12", "M20", "M21", "P30", "P31", "D13", "M22", "P32"};

// Spreads every parameter away from its initial value. With the zero bias
// of a fresh projection the first layer norm is scale invariant, so risk
// jumps between the zero embedding and any multiple of a real one; trained
// weights do not have that degeneracy.
void jitter(TriskModel& model, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  for (auto& p : model.params())
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += noise(gen);
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

PatientAttribution fake(const std::string& id, Sex sex, std::vector<CodeContribution> codes) {
  PatientAttribution p;
  p.patient_id = id;
  p.sex = sex;
  p.baseline_age_months = 900;
  p.codes = std::move(codes);
  return p;
}

}  // namespace

TEST_CASE("integrated gradients of a linear target are exact") {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> n01;
  const int rows = 5, cols = 7;
  Matrix e(rows, cols);
  Vector w(cols);
  for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = n01(gen);
  for (auto& v : w) v = n01(gen);
  // Risk surrogate: w . mean over rows.
  const GradientFn f = [&](const Matrix& x, Matrix& g) {
    g = Matrix(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) g.row(r) = w.transpose() / rows;
    return (x.colwise().mean() * w)(0, 0);
  };
  for (int steps : {2, 7, 64}) {
    const Matrix ig = integrated_gradients(e, f, steps);
    for (Eigen::Index r = 0; r < rows; ++r)
      CHECK(ig.row(r).sum() == doctest::Approx(e.row(r).dot(w) / rows).epsilon(1e-13));
  }
}

TEST_CASE("integrated gradients of a quadratic follow the midpoint rule") {
  // f(x) = sum x^3 has IG_j = x_j * mean_k 3 (a_k x_j)^2 with midpoints a_k.
  Matrix x(1, 3);
  x << 0.5, -1.0, 2.0;
  const GradientFn f = [](const Matrix& p, Matrix& g) {
    g = 3.0 * p.array().square();
    return p.array().cube().sum();
  };
  const int m = 10;
  double mean_sq = 0.0;
  for (int k = 0; k < m; ++k) mean_sq += std::pow((k + 0.5) / m, 2);
  mean_sq /= m;
  const Matrix ig = integrated_gradients(x, f, m);
  for (Eigen::Index j = 0; j < 3; ++j)
    CHECK(ig(0, j) == doctest::Approx(3.0 * std::pow(x(0, j), 3) * mean_sq).epsilon(1e-14));
}

TEST_CASE("completeness on random patients") {
  TriskModel model(small_model(), small_head(), static_cast<int>(kPool.size()) + Vocabulary::kReserved, 5);
  jitter(model, 5);
  const auto vocab = Vocabulary::from_codes(kPool);
  std::mt19937_64 gen(7);
  AttributionConfig cfg;
  cfg.ig_steps = 256;
  for (int i = 0; i < 20; ++i) {
    const auto p = testutil::random_patient(gen, "R" + std::to_string(i), 2 + i % 6);
    const auto seq = tokenize(p, vocab, 64);
    const auto a = ig_patient(seq, model, cfg);
    const double gap = a.risk - a.baseline_risk;
    REQUIRE(std::abs(gap) > 1e-6);
    INFO("patient " << i << " gap " << gap);
    CHECK(std::abs(sum(a.contributions) - gap) / std::abs(gap) < 0.01);
  }
}

TEST_CASE("contributions settle as the step count doubles") {
  TriskModel model(small_model(), small_head(), static_cast<int>(kPool.size()) + Vocabulary::kReserved, 9);
  jitter(model, 9);
  const auto vocab = Vocabulary::from_codes(kPool);
  std::mt19937_64 gen(11);
  const auto seq = tokenize(testutil::random_patient(gen, "S", 4), vocab, 64);
  AttributionConfig coarse, fine;
  coarse.ig_steps = 128;
  fine.ig_steps = 256;
  const auto a = ig_patient(seq, model, coarse);
  const auto b = ig_patient(seq, model, fine);
  double scale = 0.0;
  for (double c : b.contributions) scale = std::max(scale, std::abs(c));
  // Relative change for tokens carrying at least 1% of the largest
  // contribution; smaller ones are sums with heavy cancellation and are
  // held to the same bound on the 1% scale.
  for (std::size_t i = 0; i < a.contributions.size(); ++i) {
    INFO("token " << i << ": " << a.contributions[i] << " vs " << b.contributions[i]);
    CHECK(std::abs(a.contributions[i] - b.contributions[i]) <= 0.005 * std::max(std::abs(b.contributions[i]), 0.01 * scale));
  }
}

TEST_CASE("a zero model attributes nothing") {
  TriskModel model(small_model(), small_head(), static_cast<int>(kPool.size()) + Vocabulary::kReserved, 13);
  model.params().set_zero();
  const auto vocab = Vocabulary::from_codes(kPool);
  std::mt19937_64 gen(13);
  const auto seq = tokenize(testutil::random_patient(gen, "Z", 5), vocab, 64);
  const auto a = ig_patient(seq, model, AttributionConfig{});
  for (double c : a.contributions) CHECK(c == 0.0);
  CHECK(a.risk == a.baseline_risk);
}

TEST_CASE("per-patient attribution takes the maximum over repeated instances") {
  TriskModel model(small_model(), small_head(), static_cast<int>(kPool.size()) + Vocabulary::kReserved, 17);
  const auto vocab = Vocabulary::from_codes(kPool);
  PatientRecord p;
  p.patient_id = "A";
  p.sex = Sex::male;
  p.baseline_age_months = 700;
  p.encounters = {{"D10", 600, 1}, {"M20", 600, 1}, {"D10", 640, 2}, {"X99", 650, 3}, {"D10", 690, 4}};
  AttributionConfig cfg;
  cfg.ig_steps = 32;
  const auto seq = tokenize(p, vocab, 64);
  const auto tokens = ig_patient(seq, model, cfg);
  const auto a = attribute_patient(p, vocab, model, cfg);

  double d10 = -1e300, sep = 0.0, unk = 0.0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.token_ids[i] == vocab.id("D10")) d10 = std::max(d10, tokens.contributions[i]);
    if (seq.token_ids[i] == Vocabulary::kSep) sep += tokens.contributions[i];
    if (seq.token_ids[i] == Vocabulary::kUnk) unk += tokens.contributions[i];
  }
  REQUIRE(a.codes.size() == 2);
  const auto it = std::find_if(a.codes.begin(), a.codes.end(), [](const auto& c) { return c.code == "D10"; });
  REQUIRE(it != a.codes.end());
  CHECK(it->contribution == d10);
  CHECK(it->first_age_months == 600);
  CHECK(a.sep == doctest::Approx(sep).epsilon(1e-14));
  CHECK(a.unk == doctest::Approx(unk).epsilon(1e-14));
  CHECK(a.pred == tokens.contributions.back());

  const auto m20 = std::find_if(a.codes.begin(), a.codes.end(), [](const auto& c) { return c.code == "M20"; });
  REQUIRE(m20 != a.codes.end());
  CHECK(m20->contribution == tokens.contributions[1]);  // single instance
}

TEST_CASE("aggregation") {
  std::vector<PatientAttribution> patients;
  // 200 patients; "A" in all, "B" in half, "C" in one (below the 1% floor).
  for (int i = 0; i < 200; ++i) {
    std::vector<CodeContribution> codes = {{"A", 0.01 * (i % 10), 600}};
    if (i % 2 == 0) codes.push_back({"B", 0.5, 240 + (i % 4) * 12 * 30});
    if (i == 0) codes.push_back({"C", 9.0, 600});
    patients.push_back(fake("P" + std::to_string(1000 + i), i % 2 ? Sex::male : Sex::female, codes));
  }
  AttributionConfig cfg;
  const auto report = aggregate(patients, cfg);

  auto find = [&](const std::string& code, const std::string& stratum) -> const AttributionRow* {
    for (const auto& r : report.rows)
      if (r.code == code && r.stratum == stratum) return &r;
    return nullptr;
  };

  SUBCASE("means, counts and intervals") {
    const auto* a = find("A", "all");
    REQUIRE(a);
    CHECK(a->count == 200);
    CHECK(a->mean == doctest::Approx(0.045).epsilon(1e-12));
    double ss = 0.0;
    for (int i = 0; i < 200; ++i) ss += std::pow(0.01 * (i % 10) - 0.045, 2);
    const double half = 1.96 * std::sqrt(ss / 199.0) / std::sqrt(200.0);
    CHECK(a->ci_low == doctest::Approx(0.045 - half).epsilon(1e-12));
    CHECK(a->ci_high == doctest::Approx(0.045 + half).epsilon(1e-12));
    const auto* b = find("B", "all");
    REQUIRE(b);
    CHECK(b->count == 100);
    CHECK(b->ci_low == b->ci_high);  // constant values
  }

  SUBCASE("prevalence floor") {
    CHECK(find("C", "all") == nullptr);
    for (const auto& r : report.rows) CHECK(r.count >= 0.01 * 200);
  }

  SUBCASE("strata and omissions") {
    REQUIRE(find("B", "sex=female"));
    CHECK(find("B", "sex=female")->count == 100);
    CHECK(find("B", "sex=male") == nullptr);
    CHECK(std::find(report.omitted_strata.begin(), report.omitted_strata.end(), "B|sex=male") !=
          report.omitted_strata.end());
    // A is first recorded at 50 years: the 50-60 bin.
    REQUIRE(find("A", "age_first=50-60"));
    CHECK(find("A", "age_first=50-60")->count == 200);
    // Baseline 75 years, A first seen at 50: 25 years before baseline.
    REQUIRE(find("A", "years_to_baseline=>=10"));
    // Even patients alternate B's first age between 20 and 80 years.
    CHECK(find("B", "age_first=<50")->count == 50);
    CHECK(find("B", "age_first=>=80")->count == 50);
  }

  SUBCASE("ranking") {
    REQUIRE(report.top.size() == 2);
    CHECK(report.top[0].code == "B");
    CHECK(report.top[1].code == "A");
    for (const auto& r : report.top) CHECK(r.stratum == "all");
  }

  SUBCASE("patient order does not matter") {
    auto shuffled = patients;
    std::mt19937_64 gen(3);
    std::shuffle(shuffled.begin(), shuffled.end(), gen);
    const auto again = aggregate(shuffled, cfg);
    REQUIRE(again.rows.size() == report.rows.size());
    for (std::size_t k = 0; k < report.rows.size(); ++k) {
      CHECK(again.rows[k].code == report.rows[k].code);
      CHECK(again.rows[k].stratum == report.rows[k].stratum);
      CHECK(again.rows[k].mean == report.rows[k].mean);
      CHECK(again.rows[k].ci_low == report.rows[k].ci_low);
    }
  }

  SUBCASE("report files") {
    testutil::TempDir dir("explain");
    write_attribution_report(dir.path(), report);
    const auto csv = testutil::slurp(dir / "attributions.csv");
    CHECK(csv.rfind("code,stratum,mean_contribution,ci_low,ci_high,count\n", 0) == 0);
    CHECK(std::filesystem::exists(dir / "top_k.tsv"));
  }
}

TEST_CASE("configuration validation") {
  AttributionConfig cfg;
  cfg.ig_steps = 1;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg = AttributionConfig{};
  cfg.prevalence_floor = 1.0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg = AttributionConfig{};
  cfg.age_bins_years = {60.0, 50.0};
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  CHECK_THROWS_AS(aggregate(std::vector<PatientAttribution>{}, AttributionConfig{}), DataError);
}
