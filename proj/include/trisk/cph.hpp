#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace trisk {

enum class CovariateType { binary, continuous, categorical };

struct Covariate {
  std::string name;
  CovariateType type = CovariateType::continuous;
  /// Categorical only: the level left out of the dummy coding and the full
  /// sorted level list (filled in from data by expand() when empty).
  std::string reference;
  std::vector<std::string> levels;
};

/// Ordered covariates of a Cox design plus optional pairwise interactions.
struct CovariateSpec {
  std::vector<Covariate> covariates;
  std::vector<std::pair<std::string, std::string>> interactions;

  void validate() const;  // throws UsageError
};

/// Raw CSV design: covariate columns as text, plus time and event.
struct DesignTable {
  std::vector<std::string> ids;  // from an optional patient_id column
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> cells;  // [row][column]
  std::vector<double> times;
  std::vector<int> events;

  std::size_t rows() const { return cells.size(); }
};

DesignTable read_design(const std::filesystem::path& path);

/// Binary for 0/1 columns, continuous otherwise; no interactions.
CovariateSpec infer_spec(const DesignTable& table);

/// Reads `name type [reference]` lines and `interaction a b` lines.
CovariateSpec read_spec(const std::filesystem::path& path);

struct ExpandedDesign {
  Eigen::MatrixXd x;
  std::vector<std::string> names;
};

/// Numeric design: dummies for categorical levels other than the reference,
/// then interaction products of the expanded columns. Categorical levels
/// and default references are recorded into `spec` so a later table expands
/// to the same columns.
ExpandedDesign expand(CovariateSpec& spec, const DesignTable& table);

struct CphOptions {
  int max_iterations = 100;
  double score_tolerance = 1e-8;
};

struct CphModel {
  std::vector<std::string> names;
  Eigen::VectorXd beta;
  Eigen::VectorXd means;
  std::vector<double> baseline_times;   // distinct event times, ascending
  std::vector<double> baseline_cumhaz;  // Breslow H0 at those times
  double log_likelihood = 0.0;
  int iterations = 0;

  /// Step function H0(t) with H0(t) = 0 before the first event time.
  double cumulative_baseline(double t) const;
};

/// Breslow partial log-likelihood of beta for the given (uncentred) design.
double partial_log_likelihood(const Eigen::MatrixXd& x, std::span<const double> times, std::span<const int> events,
                              const Eigen::VectorXd& beta);

/// Newton-Raphson with step halving on the centred design. Throws
/// DataError naming collinear or constant columns, and NumericalError with
/// the iteration trace when the score does not fall below tolerance.
CphModel cph_fit(const Eigen::MatrixXd& x, std::span<const double> times, std::span<const int> events,
                 std::vector<std::string> names = {}, const CphOptions& options = {});

/// 1 - exp(-H0(H) exp((x - mean) . beta)).
double cph_predict(const CphModel& model, const Eigen::VectorXd& x, double horizon_months);

void save_cph(const std::filesystem::path& path, const CphModel& model, const CovariateSpec& spec);
CphModel load_cph(const std::filesystem::path& path, CovariateSpec* spec = nullptr);

}  // namespace trisk
