#include "trisk/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "trisk/error.hpp"
#include "trisk/rng.hpp"

namespace trisk {

double OracleRisk::survival_at(double t_months) const {
  return std::exp(-true_hazard_per_month * t_months);
}

void validate(const SynthConfig& config) {
  if (config.n_patients < 1) throw UsageError("n_patients must be positive");
  if (!(config.baseline_hazard_per_month > 0.0)) throw UsageError("baseline hazard must be positive");
  if (!(config.mean_visits > 0.0)) throw UsageError("mean_visits must be positive");
  if (config.censoring_hazard_per_month < 0.0) throw UsageError("censoring hazard must be non-negative");
  if (!(config.horizon_months > 0.0)) throw UsageError("horizon must be positive");
  if (config.n_background_codes < 0) throw UsageError("n_background_codes must be non-negative");
  if (config.n_background_codes > 0 &&
      !(config.background_prevalence > 0.0 && config.background_prevalence < 1.0))
    throw UsageError("background prevalence must lie in (0, 1)");
  if (config.mean_repeats < 0.0) throw UsageError("mean_repeats must be non-negative");
  if (config.min_baseline_age_months < 0 ||
      config.max_baseline_age_months < config.min_baseline_age_months)
    throw UsageError("invalid baseline age range");
  std::set<std::string> names;
  for (const auto& rc : config.risk_codes) {
    if (!(rc.prevalence > 0.0 && rc.prevalence < 1.0))
      throw UsageError("risk code prevalence must lie in (0, 1): " + rc.code);
    if (!std::isfinite(rc.log_hazard_ratio)) throw UsageError("non-finite log-HR: " + rc.code);
    if (rc.code.size() < 2 || (rc.code[0] != 'D' && rc.code[0] != 'M' && rc.code[0] != 'P'))
      throw UsageError("risk code must start with D, M or P: " + rc.code);
    if (!names.insert(rc.code).second) throw UsageError("duplicate risk code: " + rc.code);
  }
}

std::vector<std::string> background_codes(int count) {
  static constexpr char kPrefix[] = {'D', 'M', 'P'};
  std::vector<std::string> codes;
  for (int i = 0; i < count; ++i) {
    codes.push_back(kPrefix[i % 3] + std::to_string(9000 + i));
  }
  return codes;
}

SyntheticCohort generate(const SynthConfig& config) {
  validate(config);
  const auto background = background_codes(config.n_background_codes);
  SyntheticCohort out;
  out.patients.reserve(static_cast<std::size_t>(config.n_patients));
  out.oracle.reserve(static_cast<std::size_t>(config.n_patients));

  for (int i = 0; i < config.n_patients; ++i) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(i)));
    PatientRecord p;
    p.patient_id = "P" + std::to_string(i);
    p.sex = rng.bernoulli(0.5) ? Sex::male : Sex::female;
    const auto age_span = static_cast<std::uint64_t>(config.max_baseline_age_months -
                                                     config.min_baseline_age_months + 1);
    p.baseline_age_months = config.min_baseline_age_months + static_cast<int>(rng.below(age_span));

    std::vector<std::string> assigned;
    double log_hr = 0.0;
    for (const auto& rc : config.risk_codes) {
      if (rng.bernoulli(rc.prevalence)) {
        assigned.push_back(rc.code);
        log_hr += rc.log_hazard_ratio;
      }
    }
    for (const auto& code : background) {
      if (rng.bernoulli(config.background_prevalence)) assigned.push_back(code);
    }

    const int n_visits = std::max(1, rng.poisson(config.mean_visits));
    // (visit, code) pairs; visits are renumbered compactly afterwards.
    std::vector<std::pair<int, std::string>> placed;
    for (const auto& code : assigned) {
      const int copies = 1 + rng.poisson(config.mean_repeats);
      for (int c = 0; c < copies; ++c) {
        placed.emplace_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_visits))), code);
      }
    }
    std::sort(placed.begin(), placed.end());
    int compact = 0;
    int previous = 0;
    for (const auto& [visit, code] : placed) {
      if (visit != previous) {
        ++compact;
        previous = visit;
      }
      EncounterRecord e;
      e.code = code;
      e.visit_index = compact;
      // Monthly spacing backward from baseline: the last visit is one month before.
      e.age_months = std::max(0, p.baseline_age_months - (n_visits - visit + 1));
      p.encounters.push_back(std::move(e));
    }

    const double hazard = config.baseline_hazard_per_month * std::exp(log_hr);
    const double event = rng.exponential(hazard);
    const double censor = config.censoring_hazard_per_month > 0.0
                              ? rng.exponential(config.censoring_hazard_per_month)
                              : std::numeric_limits<double>::infinity();
    const double stop = std::min(censor, config.horizon_months);
    if (event <= stop) {
      p.event_time_months = event;
      p.event_indicator = 1;
    } else {
      p.event_time_months = stop;
      p.event_indicator = 0;
    }
    out.oracle.push_back({p.patient_id, hazard});
    out.patients.push_back(std::move(p));
  }
  return out;
}

void write_oracle(const std::filesystem::path& path, std::span<const OracleRisk> oracle) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  for (const auto& o : oracle) out << o.patient_id << '\t' << format_double(o.true_hazard_per_month) << '\n';
}

std::vector<OracleRisk> read_oracle(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<OracleRisk> oracle;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    OracleRisk o;
    if (!(fields >> o.patient_id >> o.true_hazard_per_month) || !(o.true_hazard_per_month > 0.0))
      throw DataError("invalid oracle entry at line " + std::to_string(line_no));
    oracle.push_back(std::move(o));
  }
  return oracle;
}

void write_design(const std::filesystem::path& path, std::span<const PatientRecord> patients,
                  std::span<const RiskCode> risk_codes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << "patient_id,age_years,sex_male";
  for (const auto& rc : risk_codes) out << ",has_" << rc.code;
  out << ",time,event\n";
  for (const auto& p : patients) {
    out << p.patient_id << ',' << format_double(p.baseline_age_months / 12.0) << ','
        << (p.sex == Sex::male ? 1 : 0);
    for (const auto& rc : risk_codes) {
      const bool has = std::any_of(p.encounters.begin(), p.encounters.end(),
                                   [&](const EncounterRecord& e) { return e.code == rc.code; });
      out << ',' << (has ? 1 : 0);
    }
    out << ',' << format_double(p.event_time_months) << ',' << p.event_indicator << '\n';
  }
}

}  // namespace trisk
