#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace trisk {

/// One patient's horizon risk with the observed outcome.
struct Prediction {
  std::string patient_id;
  double risk = 0.0;
  double event_time_months = 0.0;
  int event_indicator = 0;

  bool operator==(const Prediction&) const = default;
};

/// Reads `patient_id \t risk \t event_time \t event_indicator` lines.
std::vector<Prediction> read_predictions(const std::filesystem::path& path);
void write_predictions(const std::filesystem::path& path, std::span<const Prediction> preds);

struct CIndex {
  double value = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct ConcordanceCounts {
  std::int64_t concordant = 0;
  std::int64_t tied = 0;  // tied risk within a comparable pair
  std::int64_t comparable = 0;

  double value() const { return (2.0 * concordant + tied) / (2.0 * comparable); }
};

/// Harrell's pair counts in O(n log n). A pair is comparable when the
/// patient with the strictly smaller time had the event.
ConcordanceCounts concordance_counts(std::span<const double> risk, std::span<const double> time,
                                     std::span<const int> event);

/// Harrell's C with a percentile bootstrap interval. Throws DataError
/// ("degenerate censoring") when no pair is comparable.
CIndex c_index(std::span<const Prediction> preds, int replicates = 1000, std::uint64_t seed = 20240229,
               int threads = 0);

enum class HorizonLabel { positive, negative, excluded };

/// Shared classification at horizon H used by both AUPRC and impact analysis:
/// event by H is positive, follow-up reaching H without event is negative,
/// censoring before H is excluded.
std::vector<HorizonLabel> horizon_labels(std::span<const Prediction> preds, double horizon_months);

/// Step-wise average precision over distinct score thresholds.
double average_precision(std::span<const double> scores, std::span<const int> labels);
double auprc(std::span<const Prediction> preds, double horizon_months);

/// Kaplan-Meier survival at t (right-continuous).
double kaplan_meier(std::span<const double> time, std::span<const int> event, double t);

struct CalibrationPoint {
  double predicted = 0.0;
  double observed = 0.0;
};

struct Calibration {
  std::vector<CalibrationPoint> curve;
  std::vector<double> observed;  // per patient
  double ici = 0.0;
};

/// Cox regression of the outcome on a three-knot restricted cubic spline of
/// log(-log(1 - r)); observed risk at H is read from the fit.
Calibration calibration_curve_and_ici(std::span<const Prediction> preds, double horizon_months,
                                      int grid_points = 50);

struct DecisionPoint {
  double threshold = 0.0;
  double net_benefit = 0.0;
  double treat_all = 0.0;
  double treat_none = 0.0;
  bool empty_group = false;  // nobody at or above the threshold
};

std::vector<DecisionPoint> decision_curve(std::span<const Prediction> preds, double horizon_months,
                                          std::span<const double> thresholds);

struct ImpactCounts {
  std::int64_t predicted_positive = 0;
  std::int64_t true_positive = 0;
  std::int64_t false_positive = 0;
  std::int64_t false_negative = 0;
  double ppv = 0.0;
  double sensitivity = 0.0;
};

/// Completes PPV and sensitivity from PP, FP and FN.
ImpactCounts impact_from_counts(std::int64_t predicted_positive, std::int64_t false_positive,
                                std::int64_t false_negative);
ImpactCounts impact_analysis(std::span<const Prediction> preds, double horizon_months, double threshold = 0.5);

struct MetricOptions {
  double horizon_months = 36.0;
  double impact_threshold = 0.5;
  int bootstrap_replicates = 1000;
  std::uint64_t bootstrap_seed = 20240229;
  std::vector<double> decision_thresholds;  // empty: 0.01 .. 0.99 step 0.01
  int calibration_grid = 50;
  int threads = 0;
};

/// Every metric computed independently; a failing metric records its error
/// message and leaves the others intact.
struct MetricReport {
  double horizon_months = 0.0;
  std::size_t n = 0;
  std::optional<CIndex> c_index;
  std::optional<double> auprc;
  std::optional<Calibration> calibration;
  std::optional<std::vector<DecisionPoint>> decision;
  std::optional<ImpactCounts> impact;
  std::map<std::string, std::string> errors;
};

MetricReport evaluate(std::span<const Prediction> preds, const MetricOptions& options);

/// report.json, summary.txt, calibration.csv and decision_curve.csv.
void write_report(const std::filesystem::path& dir, const MetricReport& report);

}  // namespace trisk
