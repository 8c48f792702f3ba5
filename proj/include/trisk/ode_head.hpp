#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "trisk/error.hpp"
#include "trisk/parameters.hpp"
#include "trisk/rng.hpp"

namespace trisk {

/// Cumulative hazard and survival on the monthly grid 0..horizon.
struct SurvivalCurve {
  std::vector<double> cum_hazard;  // cum_hazard[0] == 0

  int horizon_months() const { return static_cast<int>(cum_hazard.size()) - 1; }
  double survival(int month) const { return std::exp(-cum_hazard.at(static_cast<std::size_t>(month))); }
};

/// Linear interpolation of the cumulative hazard; exact at grid points.
/// Throws UsageError when t lies outside [0, horizon].
double cumulative_hazard_at(const SurvivalCurve& curve, double t_months);
double survival_at(const SurvivalCurve& curve, double t_months);
double risk_at(const SurvivalCurve& curve, double t_months);

/// Input of one stage evaluation of the rate function.
struct StageRecord {
  double cum_hazard;
  double t_months;
};

/// Classical RK4 for dL/dt = rate(L, t), L(0) = 0, with `substeps_per_month`
/// equal steps per month. Every stage input is appended to `stages` when given.
template <class Rate>
SurvivalCurve integrate_rk4(Rate&& rate, int horizon_months, int substeps_per_month,
                            std::vector<StageRecord>* stages = nullptr) {
  if (horizon_months < 1 || substeps_per_month < 1) throw UsageError("invalid ODE grid");
  const double h = 1.0 / substeps_per_month;
  SurvivalCurve curve;
  curve.cum_hazard.assign(static_cast<std::size_t>(horizon_months) + 1, 0.0);
  if (stages) stages->reserve(static_cast<std::size_t>(4 * horizon_months * substeps_per_month));
  double y = 0.0;
  const auto eval = [&](double state, double t) {
    if (stages) stages->push_back({state, t});
    const double r = rate(state, t);
    if (!std::isfinite(r)) throw NumericalError("ODE divergence");
    return r;
  };
  for (int month = 0; month < horizon_months; ++month) {
    for (int s = 0; s < substeps_per_month; ++s) {
      const double t = month + s * h;
      const double k1 = eval(y, t);
      const double k2 = eval(y + 0.5 * h * k1, t + 0.5 * h);
      const double k3 = eval(y + 0.5 * h * k2, t + 0.5 * h);
      const double k4 = eval(y + h * k3, t + h);
      y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      if (!std::isfinite(y)) throw NumericalError("ODE divergence");
    }
    curve.cum_hazard[static_cast<std::size_t>(month) + 1] = y;
  }
  return curve;
}

struct HeadConfig {
  int hidden = 32;
  int substeps_per_month = 4;
  int horizon_months = 48;
  /// Feed the current cumulative hazard back into the rate network.
  bool use_cumhaz_input = true;
  /// Rate produced by a freshly initialised head (via the output bias).
  double initial_hazard = 0.01;

  void validate() const;
  bool operator==(const HeadConfig&) const = default;
};

/// Rate network f(L, t/horizon, z) = softplus(w_out . tanh(W_z z + a_L L + a_t t/horizon + b) + b_out).
struct HeadSlots {
  std::size_t latent_w;   // E x H
  std::size_t cumhaz_w;   // 1 x H
  std::size_t time_w;     // 1 x H
  std::size_t hidden_b;   // 1 x H
  std::size_t out_w;      // H x 1
  std::size_t out_b;      // 1 x 1
};

HeadSlots add_head_parameters(ParameterSet& params, int latent_dim, const HeadConfig& config, Rng& rng,
                              double init_std);

double softplus(double x);
double inverse_softplus(double y);

/// Cumulative hazard and rate at an arbitrary time, with the interpolation
/// weights that tie it back to the grid.
struct EventPoint {
  double t_months = 0.0;
  double cum_hazard = 0.0;
  double rate = 0.0;
  int lower = 0;
  double weight = 0.0;  // cum_hazard = (1-w) L[lower] + w L[lower+1]
};

/// Upstream gradients for OdeHead::backward.
struct HeadSeeds {
  std::vector<double> grid;  // dLoss/dL[k]; empty means zero
  double event_cum_hazard = 0.0;
  double event_rate = 0.0;
};

/// Survival head evaluated for one latent vector. Gradients are exact for
/// the discretised solution (backpropagation through the unrolled RK4).
class OdeHead {
 public:
  OdeHead(const ParameterSet& params, const HeadSlots& slots, const HeadConfig& config);

  struct Trace {
    Vector latent;
    Vector latent_term;  // W_z^T z + b
    SurvivalCurve curve;
    std::vector<StageRecord> stages;
  };

  Trace integrate(const Vector& latent) const;
  double rate(const Vector& latent_term, double cum_hazard, double t_months) const;
  /// With `interpolate` off, L(t) is read from the grid point at or below t.
  EventPoint event_point(const Trace& trace, double t_months, bool interpolate = true) const;

  /// Returns dLoss/dz and, when `grads` is given, accumulates parameter
  /// gradients into it.
  Vector backward(const Trace& trace, const EventPoint* event, const HeadSeeds& seeds, Gradients* grads) const;

 private:
  const ParameterSet& params_;
  HeadSlots slots_;
  HeadConfig config_;
};

}  // namespace trisk
