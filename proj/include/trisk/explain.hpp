#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "trisk/ehr_data.hpp"
#include "trisk/model.hpp"

namespace trisk {

struct AttributionConfig {
  int ig_steps = 64;
  double horizon_months = 36.0;  // target is the risk at this horizon
  double prevalence_floor = 0.01;
  /// Upper edges of the age-at-first-recording strata, in years.
  std::vector<double> age_bins_years = {50.0, 60.0, 70.0, 80.0};
  /// Upper edges of the first-recording-to-baseline strata, in years.
  std::vector<double> years_to_baseline_bins = {1.0, 3.0, 5.0, 10.0};
  int top_k = 10;
  int threads = 0;

  void validate() const;  // throws UsageError
};

/// Scalar function with its gradient at a point.
using GradientFn = std::function<double(const Matrix& point, Matrix& grad)>;

/// Elementwise integrated gradients from the zero baseline, midpoint rule
/// with `steps` points: input * mean_k grad f((k + 1/2)/steps * input).
Matrix integrated_gradients(const Matrix& input, const GradientFn& f, int steps);

/// Risk at `horizon_months` as a function of the L x 3E concatenated
/// embedding rows of a sequence, with its gradient.
double risk_from_embedding(const TriskModel& model, const Matrix& embedded, std::span<const char> key_mask,
                           Eigen::Index pred_index, double horizon_months, Matrix* grad);

struct TokenAttribution {
  std::vector<double> contributions;  // one per token (row sum of the IG matrix)
  double risk = 0.0;                  // at the actual input
  double baseline_risk = 0.0;         // at the all-zero embedding
};

TokenAttribution ig_patient(const TokenizedSequence& seq, const TriskModel& model, const AttributionConfig& config);

struct CodeContribution {
  std::string code;
  double contribution = 0.0;  // maximum over repeated instances
  int first_age_months = 0;   // age at the code's first recording
};

struct PatientAttribution {
  std::string patient_id;
  Sex sex = Sex::female;
  int baseline_age_months = 0;
  std::vector<CodeContribution> codes;
  double sep = 0.0;   // summed over separator tokens
  double pred = 0.0;  // prediction token
  double unk = 0.0;   // summed over unknown-code tokens
  double risk = 0.0;
  double baseline_risk = 0.0;
};

PatientAttribution attribute_patient(const PatientRecord& patient, const Vocabulary& vocab, const TriskModel& model,
                                     const AttributionConfig& config);
std::vector<PatientAttribution> attribute_cohort(std::span<const PatientRecord> cohort, const Vocabulary& vocab,
                                                 const TriskModel& model, const AttributionConfig& config);

struct AttributionRow {
  std::string code;
  std::string stratum;  // "all", "sex=...", "age_first=...", "years_to_baseline=..."
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int count = 0;
};

struct AttributionReport {
  std::vector<AttributionRow> rows;
  std::vector<AttributionRow> top;            // "all" rows ranked by mean, first top_k
  std::vector<AttributionRow> special;        // [SEP], [PRED], [UNK] over all patients
  std::vector<std::string> omitted_strata;    // "code|stratum" pairs with no patients
};

/// Mean over patients of per-patient maxima, for codes held by at least
/// prevalence_floor * N patients, with normal-approximation 95% intervals.
AttributionReport aggregate(std::span<const PatientAttribution> patients, const AttributionConfig& config);

/// attributions.csv and top_k.tsv.
void write_attribution_report(const std::filesystem::path& dir, const AttributionReport& report);

}  // namespace trisk
