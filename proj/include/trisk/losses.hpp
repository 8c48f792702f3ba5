#pragma once

#include <span>
#include <vector>

#include "trisk/ode_head.hpp"

namespace trisk {

struct LossConfig {
  double lambda_xcal = 2.0;
  int dcal_bins = 10;
  /// Linear interpolation of the cumulative hazard between grid months.
  bool interpolation = true;
  double soft_bin_temperature = 1e4;

  void validate() const;  // throws UsageError
  bool operator==(const LossConfig&) const = default;
};

/// Censored negative log-likelihood of one subject:
/// -log rate(t) + L(t) for an event, L(t) when censored.
double nll(double cum_hazard_at_t, double rate_at_t, int event_indicator);
/// Same, reading L(t) from the curve by interpolation.
double nll(const SurvivalCurve& curve, double rate_at_t, double t_months, int event_indicator);

/// Probability-integral-transform value u = S(t | x) with its event flag.
struct PitValue {
  double u = 1.0;
  int event_indicator = 0;
};

struct XcalResult {
  double value = 0.0;
  std::vector<double> grad_u;  // d value / d u_i
};

/// Soft D-calibration statistic sum_b (p_b - 1/B)^2. Events add a sigmoid-
/// edged bin membership of u; censored subjects spread unit mass uniformly
/// over [0, u]. Outer bin edges are open, so each subject contributes mass 1.
XcalResult xcal(std::span<const PitValue> values, const LossConfig& config);

/// Hard-binned D-calibration statistic (the gamma -> infinity limit).
double hard_dcalibration(std::span<const PitValue> values, int bins);

/// Per-subject head outputs at the observed time.
struct SubjectOutputs {
  double cum_hazard = 0.0;  // L(t_i)
  double rate = 0.0;        // f at (L(t_i), t_i)
  int event_indicator = 0;
};

struct BatchLoss {
  double total = 0.0;
  double mean_nll = 0.0;
  double xcal = 0.0;
  std::vector<double> d_cum_hazard;  // d total / d L(t_i)
  std::vector<double> d_rate;        // d total / d rate_i
};

/// mean nll + lambda * xcal over the batch, with gradients per subject.
/// Summation runs in subject order.
BatchLoss total_loss(std::span<const SubjectOutputs> batch, const LossConfig& config);

}  // namespace trisk
