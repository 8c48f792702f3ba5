#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "test_util.hpp"
#include "trisk/error.hpp"
#include "trisk/synth.hpp"

using namespace trisk;

namespace {

PatientRecord fig_s1_patient() {
  PatientRecord p;
  p.patient_id = "A";
  p.sex = Sex::female;
  p.baseline_age_months = 403;
  p.event_time_months = 12.0;
  p.event_indicator = 1;
  p.encounters = {{"D3", 216, 1}, {"M1", 230, 2}, {"D7", 230, 2}};
  return p;
}

// Token stream written out by hand from the visit structure, no truncation.
std::vector<int> expected_stream(const PatientRecord& p, const Vocabulary& v) {
  std::vector<int> out;
  for (std::size_t i = 0; i < p.encounters.size(); ++i) {
    out.push_back(v.contains(p.encounters[i].code) ? v.id(p.encounters[i].code) : Vocabulary::kUnk);
    if (i + 1 == p.encounters.size() || p.encounters[i + 1].visit_index != p.encounters[i].visit_index)
      out.push_back(Vocabulary::kSep);
  }
  return out;
}

}  // namespace

TEST_CASE("tokenize reproduces the three-visit layout") {
  const auto p = fig_s1_patient();
  const auto vocab = Vocabulary::from_codes({"D3", "D7", "M1"});
  const auto seq = tokenize(p, vocab, 512);
  const std::vector<int> tokens = {vocab.id("D3"), Vocabulary::kSep, vocab.id("M1"), vocab.id("D7"),
                                   Vocabulary::kSep, Vocabulary::kPred};
  CHECK(seq.token_ids == tokens);
  CHECK(seq.ages_months == std::vector<int>{216, 216, 230, 230, 230, 403});
  CHECK(seq.visit_positions == std::vector<int>{1, 1, 2, 2, 2, 3});
}

TEST_CASE("tokenize a single encounter") {
  PatientRecord p;
  p.patient_id = "B";
  p.baseline_age_months = 120;
  p.encounters = {{"D1", 100, 1}};
  const auto vocab = Vocabulary::from_codes({"D1"});
  const auto seq = tokenize(p, vocab, 512);
  CHECK(seq.token_ids == std::vector<int>{vocab.id("D1"), Vocabulary::kSep, Vocabulary::kPred});
  CHECK(seq.visit_positions == std::vector<int>{1, 1, 2});
  CHECK(seq.ages_months == std::vector<int>{100, 100, 120});
}

TEST_CASE("long history is truncated to the most recent tokens") {
  PatientRecord p;
  p.patient_id = "C";
  int age = 100;
  // 200 visits of 2 codes each: 600 tokens with SEPs.
  for (int v = 1; v <= 200; ++v) {
    age += 1;
    p.encounters.push_back({"D" + std::to_string(10 + v % 7), age, v});
    p.encounters.push_back({"M" + std::to_string(10 + v % 5), age, v});
  }
  p.baseline_age_months = age + 3;
  std::vector<std::string> codes;
  for (const auto& e : p.encounters) codes.push_back(e.code);
  const auto vocab = Vocabulary::from_codes(codes);

  const auto stream = expected_stream(p, vocab);
  REQUIRE(stream.size() == 600);
  const auto seq = tokenize(p, vocab, 512);
  REQUIRE(seq.size() == 512);
  CHECK(seq.token_ids.back() == Vocabulary::kPred);
  CHECK(std::equal(seq.token_ids.begin(), seq.token_ids.end() - 1, stream.end() - 511));
  CHECK(seq.visit_positions.back() == 201);
  CHECK(seq.ages_months.back() == p.baseline_age_months);
}

TEST_CASE("unknown codes map to UNK") {
  auto p = fig_s1_patient();
  const auto vocab = Vocabulary::from_codes({"D3"});
  const auto seq = tokenize(p, vocab, 512);
  CHECK(seq.token_ids[2] == Vocabulary::kUnk);
  CHECK(seq.token_ids[3] == Vocabulary::kUnk);
}

TEST_CASE("tokenize rejects max_len below 2") {
  CHECK_THROWS_AS(tokenize(fig_s1_patient(), Vocabulary(), 1), UsageError);
}

TEST_CASE("tokenization properties over random patients") {
  std::mt19937_64 gen(11);
  std::vector<std::string> pool = {"D10", "D11", "D12", "M20", "M21", "P30", "P31", "D13", "M22", "P32"};
  const auto vocab = Vocabulary::from_codes(pool);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = testutil::random_patient(gen, "R" + std::to_string(trial), 1 + trial % 25);
    const int max_len = 2 + static_cast<int>(gen() % 60);
    const auto seq = tokenize(p, vocab, max_len);
    const auto again = tokenize(p, vocab, max_len);
    CHECK(seq == again);
    REQUIRE(seq.token_ids.size() == seq.ages_months.size());
    REQUIRE(seq.token_ids.size() == seq.visit_positions.size());
    CHECK(static_cast<int>(seq.size()) <= max_len);
    CHECK(seq.token_ids.back() == Vocabulary::kPred);
    CHECK(std::is_sorted(seq.visit_positions.begin(), seq.visit_positions.end()));

    const auto stream = expected_stream(p, vocab);
    const std::size_t body = seq.size() - 1;
    REQUIRE(body <= stream.size());
    CHECK(std::equal(seq.token_ids.begin(), seq.token_ids.begin() + static_cast<std::ptrdiff_t>(body),
                     stream.end() - static_cast<std::ptrdiff_t>(body)));

    // One SEP per visit that ends inside the kept window.
    std::set<int> visits_closed;
    for (std::size_t i = 0; i < body; ++i)
      if (seq.token_ids[i] == Vocabulary::kSep) visits_closed.insert(seq.visit_positions[i]);
    const auto seps = std::count(seq.token_ids.begin(), seq.token_ids.end(), Vocabulary::kSep);
    CHECK(static_cast<std::size_t>(seps) == visits_closed.size());
    if (static_cast<std::size_t>(max_len) > stream.size()) {
      CHECK(static_cast<int>(seps) == p.encounters.back().visit_index);
    }
  }
}

TEST_CASE("vocabulary examples") {
  std::vector<PatientRecord> cohort(3);
  for (int i = 0; i < 3; ++i) {
    cohort[i].patient_id = "P" + std::to_string(i);
    cohort[i].baseline_age_months = 100;
    cohort[i].encounters = {{"D1", 50, 1}};
  }
  cohort[1].encounters.push_back({"M9", 50, 1});

  const auto half = build_vocabulary(cohort, 0.5);
  CHECK(half.size() == Vocabulary::kReserved + 1);
  CHECK(half.id("D1") == 4);
  CHECK_FALSE(half.contains("M9"));

  const auto all = build_vocabulary(cohort, 0.0);
  CHECK(all.clinical_codes() == std::vector<std::string>{"D1", "M9"});

  CHECK_THROWS_WITH_AS(build_vocabulary(std::vector<PatientRecord>{}, 0.0), "empty cohort", DataError);
}

TEST_CASE("vocabulary is a bijection with fixed reserved ids") {
  const auto vocab = Vocabulary::from_codes({"P5", "D2", "M1", "D2"});
  CHECK(vocab.id("[PAD]") == Vocabulary::kPad);
  CHECK(vocab.id("[SEP]") == Vocabulary::kSep);
  CHECK(vocab.id("[PRED]") == Vocabulary::kPred);
  CHECK(vocab.id("[UNK]") == Vocabulary::kUnk);
  CHECK(vocab.size() == 7);
  for (int id = 0; id < vocab.size(); ++id) CHECK(vocab.id(vocab.token(id)) == id);
  CHECK(vocab.clinical_codes() == std::vector<std::string>{"D2", "M1", "P5"});
  const auto counts = vocab.modality_counts();
  CHECK(counts.diagnosis == 1);
  CHECK(counts.medication == 1);
  CHECK(counts.procedure == 1);

  std::stringstream ss;
  vocab.write(ss);
  const auto back = Vocabulary::read(ss);
  CHECK(back == vocab);
  CHECK(back.hash() == vocab.hash());
}

TEST_CASE("vocabulary matches a direct prevalence count on a synthetic cohort") {
  SynthConfig cfg;
  cfg.n_patients = 1000;
  cfg.seed = 5;
  cfg.risk_codes = {{"D0001", 0.3, 1.0}, {"D0002", 0.002, 0.5}};
  cfg.n_background_codes = 30;
  cfg.background_prevalence = 0.01;
  const auto cohort = generate(cfg).patients;

  std::map<std::string, int> patients_with;
  for (const auto& p : cohort) {
    std::set<std::string> mine;
    for (const auto& e : p.encounters) mine.insert(e.code);
    for (const auto& c : mine) ++patients_with[c];
  }
  std::vector<std::string> expected;
  for (const auto& [code, n] : patients_with)
    if (n >= 1) expected.push_back(code);

  const auto vocab = build_vocabulary(cohort, 0.001);
  CHECK(vocab.clinical_codes() == expected);

  auto shuffled = cohort;
  std::mt19937_64 gen(3);
  std::shuffle(shuffled.begin(), shuffled.end(), gen);
  CHECK(build_vocabulary(shuffled, 0.001) == vocab);
}

TEST_CASE("cohort file round trip") {
  const std::string fixture =
      "P1\tfemale\t403\t12.5\t1\t1:D3:216;2:M1:230;2:D7:230\n"
      "P2\tmale\t700\t48\t0\t\n";
  std::istringstream in(fixture);
  const auto cohort = parse_cohort(in);
  REQUIRE(cohort.size() == 2);
  auto first = fig_s1_patient();
  first.patient_id = "P1";
  first.event_time_months = 12.5;
  CHECK(cohort[0] == first);
  CHECK(cohort[1].patient_id == "P2");
  CHECK(cohort[1].sex == Sex::male);
  CHECK(cohort[1].encounters.empty());
  CHECK(cohort[1].event_indicator == 0);

  std::ostringstream out;
  write_cohort(out, cohort);
  CHECK(out.str() == fixture);
}

TEST_CASE("malformed cohort lines are reported with their line number") {
  std::istringstream bad_event("P1\tfemale\t403\t12.5\t1\t1:D3:216\nP2\tmale\t700\t48\t2\t1:D3:216\n");
  CHECK_THROWS_WITH_AS(parse_cohort(bad_event), "invalid event_indicator at line 2", DataError);
  std::istringstream bad_sex("P1\tother\t403\t12.5\t1\t1:D3:216\n");
  CHECK_THROWS_AS(parse_cohort(bad_sex), DataError);
  std::istringstream late("P1\tmale\t100\t12.5\t1\t1:D3:216\n");
  CHECK_THROWS_AS(parse_cohort(late), DataError);
  std::istringstream fields("P1\tmale\t100\n");
  CHECK_THROWS_AS(parse_cohort(fields), DataError);
}

TEST_CASE("a synthetic cohort file survives read then write byte for byte") {
  SynthConfig cfg;
  cfg.n_patients = 1000;
  cfg.seed = 9;
  cfg.risk_codes = {{"D0001", 0.5, std::log(4.0)}, {"D0002", 0.5, std::log(2.0)}};
  cfg.censoring_hazard_per_month = 0.01;
  cfg.n_background_codes = 5;
  const auto cohort = generate(cfg).patients;
  testutil::TempDir dir("cohort");
  write_cohort(dir / "a.tsv", cohort);
  const auto text = testutil::slurp(dir / "a.tsv");
  const auto back = read_cohort(dir / "a.tsv");
  CHECK(back == cohort);
  write_cohort(dir / "b.tsv", back);
  CHECK(testutil::slurp(dir / "b.tsv") == text);
}
