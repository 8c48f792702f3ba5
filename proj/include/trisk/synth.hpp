#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "trisk/ehr_data.hpp"

namespace trisk {

struct RiskCode {
  std::string code;
  double prevalence = 0.5;  // in (0, 1)
  double log_hazard_ratio = 0.0;
};

struct SynthConfig {
  int n_patients = 1000;
  std::uint64_t seed = 1;
  std::vector<RiskCode> risk_codes;
  double baseline_hazard_per_month = 0.01;
  double mean_visits = 4.0;
  double censoring_hazard_per_month = 0.0;
  double horizon_months = 48.0;
  /// Background codes with no effect on the hazard, named D9000, M9001, ...
  int n_background_codes = 0;
  double background_prevalence = 0.2;
  /// Mean number of extra recordings of an assigned code.
  double mean_repeats = 0.3;
  int min_baseline_age_months = 40 * 12;
  int max_baseline_age_months = 90 * 12;
};

/// Ground truth for one simulated patient.
struct OracleRisk {
  std::string patient_id;
  double true_hazard_per_month = 0.0;

  double survival_at(double t_months) const;
  double risk_at(double t_months) const { return 1.0 - survival_at(t_months); }
};

struct SyntheticCohort {
  std::vector<PatientRecord> patients;
  std::vector<OracleRisk> oracle;
};

/// Throws UsageError on an invalid configuration.
void validate(const SynthConfig& config);

/// Exponential event times with hazard baseline * exp(sum of assigned
/// log-HRs), independent exponential censoring, administrative cut at the
/// horizon. Patient i draws only from the substream derive_seed(seed, i).
SyntheticCohort generate(const SynthConfig& config);

std::vector<std::string> background_codes(int count);

void write_oracle(const std::filesystem::path& path, std::span<const OracleRisk> oracle);
std::vector<OracleRisk> read_oracle(const std::filesystem::path& path);

/// Baseline covariate design (age, sex, one flag per risk code) in the CSV
/// layout read by the Cox baseline, for head-to-head comparisons.
void write_design(const std::filesystem::path& path, std::span<const PatientRecord> patients,
                  std::span<const RiskCode> risk_codes);

}  // namespace trisk
