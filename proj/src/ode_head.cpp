#include "trisk/ode_head.hpp"

#include <algorithm>
#include <cmath>

namespace trisk {

double cumulative_hazard_at(const SurvivalCurve& curve, double t_months) {
  const int horizon = curve.horizon_months();
  if (!(t_months >= 0.0 && t_months <= horizon))
    throw UsageError("time " + std::to_string(t_months) + " outside [0, " + std::to_string(horizon) + "]");
  const int lower = std::min(static_cast<int>(std::floor(t_months)), horizon);
  if (lower == horizon) return curve.cum_hazard.back();
  const double w = t_months - lower;
  const auto k = static_cast<std::size_t>(lower);
  return curve.cum_hazard[k] + w * (curve.cum_hazard[k + 1] - curve.cum_hazard[k]);
}

double survival_at(const SurvivalCurve& curve, double t_months) {
  return std::exp(-cumulative_hazard_at(curve, t_months));
}

double risk_at(const SurvivalCurve& curve, double t_months) { return 1.0 - survival_at(curve, t_months); }

void HeadConfig::validate() const {
  if (hidden < 1) throw UsageError("ode_hidden must be positive");
  if (substeps_per_month < 1) throw UsageError("ode_substeps must be positive");
  if (horizon_months < 1) throw UsageError("horizon must be positive");
  if (!(initial_hazard > 0.0)) throw UsageError("initial_hazard must be positive");
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

HeadSlots add_head_parameters(ParameterSet& params, int latent_dim, const HeadConfig& config, Rng& rng,
                              double init_std) {
  const int h = config.hidden;
  auto normal = [&](int rows, int cols) {
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = init_std * rng.normal();
    return m;
  };
  HeadSlots slots{};
  slots.latent_w = params.add("head.latent_w", normal(latent_dim, h));
  slots.cumhaz_w = params.add("head.cumhaz_w", config.use_cumhaz_input ? normal(1, h) : Matrix::Zero(1, h));
  slots.time_w = params.add("head.time_w", normal(1, h));
  slots.hidden_b = params.add("head.hidden_b", Matrix::Zero(1, h), false);
  slots.out_w = params.add("head.out_w", normal(h, 1));
  Matrix out_b(1, 1);
  out_b(0, 0) = inverse_softplus(config.initial_hazard);
  slots.out_b = params.add("head.out_b", out_b, false);
  return slots;
}

OdeHead::OdeHead(const ParameterSet& params, const HeadSlots& slots, const HeadConfig& config)
    : params_(params), slots_(slots), config_(config) {}

double OdeHead::rate(const Vector& latent_term, double cum_hazard, double t_months) const {
  const auto& cumhaz_w = params_[slots_.cumhaz_w].value;
  const auto& time_w = params_[slots_.time_w].value;
  const auto& out_w = params_[slots_.out_w].value;
  const double tau = t_months / config_.horizon_months;
  const double lam = config_.use_cumhaz_input ? cum_hazard : 0.0;
  double out = params_[slots_.out_b].value(0, 0);
  for (Eigen::Index j = 0; j < latent_term.size(); ++j) {
    const double pre = latent_term[j] + lam * cumhaz_w(0, j) + tau * time_w(0, j);
    out += out_w(j, 0) * std::tanh(pre);
  }
  return softplus(out);
}

OdeHead::Trace OdeHead::integrate(const Vector& latent) const {
  const auto& latent_w = params_[slots_.latent_w].value;
  if (latent.size() != latent_w.rows()) throw UsageError("latent size does not match head");
  if (!latent.allFinite()) throw NumericalError("non-finite latent state");
  Trace trace;
  trace.latent = latent;
  trace.latent_term = latent_w.transpose() * latent + params_[slots_.hidden_b].value.row(0).transpose();
  trace.curve = integrate_rk4([&](double y, double t) { return rate(trace.latent_term, y, t); },
                              config_.horizon_months, config_.substeps_per_month, &trace.stages);
  return trace;
}

EventPoint OdeHead::event_point(const Trace& trace, double t_months, bool interpolate) const {
  EventPoint p;
  const int horizon = trace.curve.horizon_months();
  if (!(t_months >= 0.0 && t_months <= horizon)) throw UsageError("event time outside the horizon");
  p.t_months = t_months;
  p.lower = std::min(static_cast<int>(std::floor(t_months)), horizon - 1);
  p.weight = interpolate ? std::clamp(t_months - p.lower, 0.0, 1.0) : (t_months >= horizon ? 1.0 : 0.0);
  const auto k = static_cast<std::size_t>(p.lower);
  p.cum_hazard = (1.0 - p.weight) * trace.curve.cum_hazard[k] + p.weight * trace.curve.cum_hazard[k + 1];
  p.rate = rate(trace.latent_term, p.cum_hazard, t_months);
  if (!std::isfinite(p.rate)) throw NumericalError("non-finite hazard rate");
  return p;
}

namespace {

struct LocalGrad {
  Vector cumhaz_w, time_w, out_w, latent_term;
  double out_b = 0.0;
};

}  // namespace

Vector OdeHead::backward(const Trace& trace, const EventPoint* event, const HeadSeeds& seeds,
                         Gradients* grads) const {
  const auto& cumhaz_w = params_[slots_.cumhaz_w].value;
  const auto& time_w = params_[slots_.time_w].value;
  const auto& out_w = params_[slots_.out_w].value;
  const double out_b = params_[slots_.out_b].value(0, 0);
  const Eigen::Index hidden = trace.latent_term.size();
  const bool feed_back = config_.use_cumhaz_input;

  LocalGrad g;
  g.cumhaz_w = Vector::Zero(hidden);
  g.time_w = Vector::Zero(hidden);
  g.out_w = Vector::Zero(hidden);
  g.latent_term = Vector::Zero(hidden);
  Vector act(hidden);

  // Returns df/dL * seed and accumulates parameter contributions.
  const auto vjp = [&](double y, double t, double seed) {
    const double tau = t / config_.horizon_months;
    const double lam = feed_back ? y : 0.0;
    double out = out_b;
    for (Eigen::Index j = 0; j < hidden; ++j) {
      act[j] = std::tanh(trace.latent_term[j] + lam * cumhaz_w(0, j) + tau * time_w(0, j));
      out += out_w(j, 0) * act[j];
    }
    const double d_out = seed * sigmoid(out);
    g.out_b += d_out;
    double dy = 0.0;
    for (Eigen::Index j = 0; j < hidden; ++j) {
      g.out_w[j] += d_out * act[j];
      const double dp = d_out * out_w(j, 0) * (1.0 - act[j] * act[j]);
      g.latent_term[j] += dp;
      g.time_w[j] += dp * tau;
      if (feed_back) {
        g.cumhaz_w[j] += dp * lam;
        dy += dp * cumhaz_w(0, j);
      }
    }
    return dy;
  };

  const int horizon = trace.curve.horizon_months();
  std::vector<double> grid(static_cast<std::size_t>(horizon) + 1, 0.0);
  if (!seeds.grid.empty()) {
    if (seeds.grid.size() != grid.size()) throw UsageError("grid seed length mismatch");
    grid = seeds.grid;
  }
  if (event) {
    double d_cum = seeds.event_cum_hazard;
    if (seeds.event_rate != 0.0) d_cum += vjp(event->cum_hazard, event->t_months, seeds.event_rate);
    const auto k = static_cast<std::size_t>(event->lower);
    grid[k] += (1.0 - event->weight) * d_cum;
    grid[k + 1] += event->weight * d_cum;
  }

  const int per_month = config_.substeps_per_month;
  const double h = 1.0 / per_month;
  const int steps = horizon * per_month;
  if (trace.stages.size() != static_cast<std::size_t>(4 * steps)) throw UsageError("trace does not match head");
  double adj = 0.0;
  for (int n = steps - 1; n >= 0; --n) {
    if ((n + 1) % per_month == 0) adj += grid[static_cast<std::size_t>((n + 1) / per_month)];
    const StageRecord* st = &trace.stages[static_cast<std::size_t>(4 * n)];
    double k4 = adj * h / 6.0;
    double k3 = adj * h / 3.0;
    double k2 = adj * h / 3.0;
    double k1 = adj * h / 6.0;
    double dy = adj;
    const double s4 = vjp(st[3].cum_hazard, st[3].t_months, k4);
    dy += s4;
    k3 += h * s4;
    const double s3 = vjp(st[2].cum_hazard, st[2].t_months, k3);
    dy += s3;
    k2 += 0.5 * h * s3;
    const double s2 = vjp(st[1].cum_hazard, st[1].t_months, k2);
    dy += s2;
    k1 += 0.5 * h * s2;
    dy += vjp(st[0].cum_hazard, st[0].t_months, k1);
    adj = dy;
  }

  if (grads) {
    auto& G = *grads;
    G[slots_.latent_w].noalias() += trace.latent * g.latent_term.transpose();
    G[slots_.hidden_b].row(0) += g.latent_term.transpose();
    if (feed_back) G[slots_.cumhaz_w].row(0) += g.cumhaz_w.transpose();
    G[slots_.time_w].row(0) += g.time_w.transpose();
    G[slots_.out_w].col(0) += g.out_w;
    G[slots_.out_b](0, 0) += g.out_b;
  }
  return params_[slots_.latent_w].value * g.latent_term;
}

}  // namespace trisk
