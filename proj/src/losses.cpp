#include "trisk/losses.hpp"

#include <algorithm>
#include <cmath>

#include "trisk/error.hpp"

namespace trisk {

void LossConfig::validate() const {
  if (!(lambda_xcal >= 0.0)) throw UsageError("lambda_xcal must be non-negative");
  if (dcal_bins < 2) throw UsageError("dcal_bins must be at least 2");
  if (!(soft_bin_temperature > 0.0)) throw UsageError("soft_bin_temperature must be positive");
}

double nll(double cum_hazard_at_t, double rate_at_t, int event_indicator) {
  if (!std::isfinite(cum_hazard_at_t)) throw NumericalError("non-finite cumulative hazard");
  if (event_indicator == 0) return cum_hazard_at_t;
  if (!(rate_at_t > 0.0) || !std::isfinite(rate_at_t)) throw NumericalError("hazard rate must be positive and finite");
  return -std::log(rate_at_t) + cum_hazard_at_t;
}

double nll(const SurvivalCurve& curve, double rate_at_t, double t_months, int event_indicator) {
  return nll(cumulative_hazard_at(curve, t_months), rate_at_t, event_indicator);
}

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Soft indicator of u > edge and its derivative in u.
struct Step {
  double value;
  double slope;
};

Step soft_step(double u, double edge, double gamma) {
  const double s = sigmoid(gamma * (u - edge));
  return {s, gamma * s * sigmoid(-gamma * (u - edge))};
}

constexpr double kTinyU = 1e-12;

}  // namespace

XcalResult xcal(std::span<const PitValue> values, const LossConfig& config) {
  config.validate();
  if (values.empty()) throw UsageError("no subjects");
  const int bins = config.dcal_bins;
  const double width = 1.0 / bins;
  const double gamma = config.soft_bin_temperature;
  const double n = static_cast<double>(values.size());

  // mass[i*bins + b] and its derivative in u_i.
  std::vector<double> mass(values.size() * static_cast<std::size_t>(bins));
  std::vector<double> dmass(mass.size());
  std::vector<double> bin_mass(static_cast<std::size_t>(bins), 0.0);

  for (std::size_t i = 0; i < values.size(); ++i) {
    const double u = values[i].u;
    if (!(u >= 0.0 && u <= 1.0)) throw UsageError("PIT value outside [0, 1]");
    const bool censored = values[i].event_indicator == 0;
    for (int b = 0; b < bins; ++b) {
      const double lo = b * width;
      const double hi = (b + 1) * width;
      const Step above_lo = b == 0 ? Step{1.0, 0.0} : soft_step(u, lo, gamma);
      const Step above_hi = b == bins - 1 ? Step{0.0, 0.0} : soft_step(u, hi, gamma);
      const double member = above_lo.value - above_hi.value;
      const double dmember = above_lo.slope - above_hi.slope;
      double m = member;
      double dm = dmember;
      if (censored) {
        if (u < kTinyU) {
          m = b == 0 ? 1.0 : 0.0;
          dm = 0.0;
        } else {
          // Soft overlap of the bin with [0, u], normalised by u.
          const double overlap = (u - lo) * member + width * above_hi.value;
          const double doverlap = member + (u - lo) * dmember + width * above_hi.slope;
          m = overlap / u;
          dm = (doverlap * u - overlap) / (u * u);
        }
      }
      const std::size_t k = i * static_cast<std::size_t>(bins) + static_cast<std::size_t>(b);
      mass[k] = m;
      dmass[k] = dm;
      bin_mass[static_cast<std::size_t>(b)] += m;
    }
  }

  XcalResult result;
  std::vector<double> excess(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    const double p = bin_mass[static_cast<std::size_t>(b)] / n;
    excess[static_cast<std::size_t>(b)] = p - width;
    result.value += excess[static_cast<std::size_t>(b)] * excess[static_cast<std::size_t>(b)];
  }
  result.grad_u.assign(values.size(), 0.0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    double g = 0.0;
    for (int b = 0; b < bins; ++b)
      g += 2.0 * excess[static_cast<std::size_t>(b)] * dmass[i * static_cast<std::size_t>(bins) + static_cast<std::size_t>(b)];
    result.grad_u[i] = g / n;
  }
  return result;
}

double hard_dcalibration(std::span<const PitValue> values, int bins) {
  if (values.empty()) throw UsageError("no subjects");
  if (bins < 2) throw UsageError("dcal_bins must be at least 2");
  const double width = 1.0 / bins;
  std::vector<double> bin_mass(static_cast<std::size_t>(bins), 0.0);
  for (const auto& v : values) {
    if (!(v.u >= 0.0 && v.u <= 1.0)) throw UsageError("PIT value outside [0, 1]");
    if (v.event_indicator != 0) {
      const int b = std::min(static_cast<int>(v.u * bins), bins - 1);
      bin_mass[static_cast<std::size_t>(b)] += 1.0;
    } else if (v.u < kTinyU) {
      bin_mass[0] += 1.0;
    } else {
      for (int b = 0; b < bins; ++b) {
        const double overlap = std::clamp(v.u - b * width, 0.0, width);
        bin_mass[static_cast<std::size_t>(b)] += overlap / v.u;
      }
    }
  }
  double stat = 0.0;
  for (double m : bin_mass) {
    const double d = m / static_cast<double>(values.size()) - width;
    stat += d * d;
  }
  return stat;
}

BatchLoss total_loss(std::span<const SubjectOutputs> batch, const LossConfig& config) {
  config.validate();
  if (batch.empty()) throw UsageError("no subjects");
  const double n = static_cast<double>(batch.size());
  BatchLoss out;
  out.d_cum_hazard.assign(batch.size(), 0.0);
  out.d_rate.assign(batch.size(), 0.0);
  std::vector<PitValue> pit(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    out.mean_nll += nll(s.cum_hazard, s.rate, s.event_indicator);
    out.d_cum_hazard[i] = 1.0 / n;
    if (s.event_indicator != 0) out.d_rate[i] = -1.0 / (s.rate * n);
    pit[i] = {std::exp(-s.cum_hazard), s.event_indicator};
  }
  out.mean_nll /= n;
  out.total = out.mean_nll;
  if (config.lambda_xcal > 0.0) {
    const auto x = xcal(pit, config);
    out.xcal = x.value;
    out.total += config.lambda_xcal * x.value;
    for (std::size_t i = 0; i < batch.size(); ++i)
      out.d_cum_hazard[i] += config.lambda_xcal * x.grad_u[i] * (-pit[i].u);  // du/dL = -u
  }
  if (!std::isfinite(out.total)) throw NumericalError("non-finite loss");
  return out;
}

}  // namespace trisk
