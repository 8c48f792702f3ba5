#include "trisk/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "trisk/cph.hpp"
#include "trisk/ehr_data.hpp"
#include "trisk/error.hpp"
#include "trisk/rng.hpp"
#include "trisk/trainer.hpp"

namespace trisk {

namespace {

class Fenwick {
 public:
  explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t i, std::int64_t w) {
    for (; i < tree_.size(); i += i & (~i + 1)) tree_[i] += w;
  }
  std::int64_t prefix(std::size_t i) const {
    std::int64_t s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<std::int64_t> tree_;
};

// Time-descending order and dense 1-based risk ranks, shared by every
// (re)weighting of the same sample.
struct ConcordanceIndex {
  std::vector<std::size_t> order;
  std::vector<std::size_t> rank;
  std::size_t distinct = 0;
};

ConcordanceIndex index_for(std::span<const double> risk, std::span<const double> time) {
  const std::size_t n = risk.size();
  ConcordanceIndex ix;
  ix.order.resize(n);
  std::iota(ix.order.begin(), ix.order.end(), 0);
  std::sort(ix.order.begin(), ix.order.end(), [&](std::size_t a, std::size_t b) { return time[a] > time[b]; });
  std::vector<double> sorted(risk.begin(), risk.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  ix.distinct = sorted.size();
  ix.rank.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    ix.rank[i] = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), risk[i]) - sorted.begin()) + 1;
  return ix;
}

// Each patient i stands for weight[i] copies (bootstrap multiplicities).
ConcordanceCounts weighted_counts(const ConcordanceIndex& ix, std::span<const double> time, std::span<const int> event,
                                  std::span<const std::int64_t> weight) {
  ConcordanceCounts c;
  Fenwick fw(ix.distinct);
  std::int64_t later = 0;
  std::size_t k = 0;
  const std::size_t n = ix.order.size();
  while (k < n) {
    const double t = time[ix.order[k]];
    std::size_t end = k;
    while (end < n && time[ix.order[end]] == t) ++end;
    for (std::size_t m = k; m < end; ++m) {
      const std::size_t i = ix.order[m];
      if (event[i] == 0 || weight[i] == 0) continue;
      const std::int64_t below = fw.prefix(ix.rank[i] - 1);
      const std::int64_t at = fw.prefix(ix.rank[i]) - below;
      c.concordant += weight[i] * below;
      c.tied += weight[i] * at;
      c.comparable += weight[i] * later;
    }
    for (std::size_t m = k; m < end; ++m) {
      const std::size_t i = ix.order[m];
      fw.add(ix.rank[i], weight[i]);
      later += weight[i];
    }
    k = end;
  }
  return c;
}

void check_predictions(std::span<const Prediction> preds) {
  for (const auto& p : preds) {
    if (!std::isfinite(p.risk) || p.risk < 0.0 || p.risk > 1.0) throw DataError("risk outside [0, 1] for " + p.patient_id);
    if (!std::isfinite(p.event_time_months) || p.event_time_months < 0.0)
      throw DataError("invalid event time for " + p.patient_id);
    if (p.event_indicator != 0 && p.event_indicator != 1) throw DataError("invalid event indicator for " + p.patient_id);
  }
}

double percentile(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

// Three-knot restricted cubic spline basis (linear term plus one cubic).
struct Spline {
  double k1, k2, k3;
  Eigen::Vector2d operator()(double g) const {
    auto cube = [](double v) { return v > 0.0 ? v * v * v : 0.0; };
    const double nonlinear =
        (cube(g - k1) - cube(g - k2) * (k3 - k1) / (k3 - k2) + cube(g - k3) * (k2 - k1) / (k3 - k2)) /
        ((k3 - k1) * (k3 - k1));
    return {g, nonlinear};
  }
};

double cloglog(double r) { return std::log(-std::log1p(-r)); }

std::string fixed3(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Prediction> preds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (line_no == 1 && line.rfind("patient_id", 0) == 0)) continue;
    std::vector<std::string> f;
    std::istringstream ss(line);
    for (std::string field; std::getline(ss, field, '\t');) f.push_back(field);
    if (f.size() != 4) throw DataError("invalid field count at line " + std::to_string(line_no));
    Prediction p;
    p.patient_id = f[0];
    auto number = [&](const std::string& text, const char* name) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(text, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != text.size()) throw DataError(std::string("invalid ") + name + " at line " + std::to_string(line_no));
      return v;
    };
    p.risk = number(f[1], "risk");
    p.event_time_months = number(f[2], "event_time");
    const double ev = number(f[3], "event_indicator");
    if (ev != 0.0 && ev != 1.0) throw DataError("invalid event_indicator at line " + std::to_string(line_no));
    p.event_indicator = static_cast<int>(ev);
    if (!(p.risk >= 0.0 && p.risk <= 1.0)) throw DataError("invalid risk at line " + std::to_string(line_no));
    preds.push_back(std::move(p));
  }
  return preds;
}

void write_predictions(const std::filesystem::path& path, std::span<const Prediction> preds) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << "patient_id\trisk\tevent_time\tevent_indicator\n";
  for (const auto& p : preds)
    out << p.patient_id << '\t' << format_double(p.risk) << '\t' << format_double(p.event_time_months) << '\t'
        << p.event_indicator << '\n';
}

ConcordanceCounts concordance_counts(std::span<const double> risk, std::span<const double> time,
                                     std::span<const int> event) {
  if (risk.size() != time.size() || risk.size() != event.size()) throw DataError("prediction arrays differ in length");
  const std::vector<std::int64_t> ones(risk.size(), 1);
  return weighted_counts(index_for(risk, time), time, event, ones);
}

CIndex c_index(std::span<const Prediction> preds, int replicates, std::uint64_t seed, int threads) {
  check_predictions(preds);
  if (preds.size() < 2) throw DataError("c_index needs at least two patients");
  const std::size_t n = preds.size();
  std::vector<double> risk(n), time(n);
  std::vector<int> event(n);
  for (std::size_t i = 0; i < n; ++i) {
    risk[i] = preds[i].risk;
    time[i] = preds[i].event_time_months;
    event[i] = preds[i].event_indicator;
  }
  const auto ix = index_for(risk, time);
  const std::vector<std::int64_t> ones(n, 1);
  const auto full = weighted_counts(ix, time, event, ones);
  if (full.comparable == 0) throw DataError("degenerate censoring");
  CIndex out;
  out.value = full.value();
  out.ci_low = out.ci_high = out.value;
  if (replicates <= 0) return out;

  std::vector<double> stats(static_cast<std::size_t>(replicates), std::nan(""));
  parallel_for(stats.size(), threads, [&](std::size_t b) {
    Rng rng(derive_seed(seed, b));
    std::vector<std::int64_t> w(n, 0);
    for (std::size_t k = 0; k < n; ++k) ++w[rng.below(n)];
    const auto c = weighted_counts(ix, time, event, w);
    if (c.comparable > 0) stats[b] = c.value();
  });
  stats.erase(std::remove_if(stats.begin(), stats.end(), [](double v) { return std::isnan(v); }), stats.end());
  if (!stats.empty()) {
    out.ci_low = percentile(stats, 0.025);
    out.ci_high = percentile(stats, 0.975);
  }
  return out;
}

std::vector<HorizonLabel> horizon_labels(std::span<const Prediction> preds, double horizon_months) {
  if (!(horizon_months > 0.0)) throw UsageError("horizon must be positive");
  std::vector<HorizonLabel> labels;
  labels.reserve(preds.size());
  for (const auto& p : preds) {
    if (p.event_indicator != 0 && p.event_time_months <= horizon_months) labels.push_back(HorizonLabel::positive);
    else if (p.event_time_months >= horizon_months) labels.push_back(HorizonLabel::negative);
    else labels.push_back(HorizonLabel::excluded);
  }
  return labels;
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DataError("score and label counts differ");
  const auto positives = std::count_if(labels.begin(), labels.end(), [](int l) { return l != 0; });
  if (positives == 0 || positives == static_cast<std::ptrdiff_t>(labels.size()))
    throw DataError("AUPRC needs both positive and negative patients");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::int64_t tp = 0, taken = 0;
  std::size_t k = 0;
  while (k < order.size()) {
    const double s = scores[order[k]];
    std::int64_t new_tp = 0;
    for (; k < order.size() && scores[order[k]] == s; ++k) {
      ++taken;
      if (labels[order[k]] != 0) ++new_tp;
    }
    tp += new_tp;
    if (new_tp > 0)
      ap += static_cast<double>(new_tp) / static_cast<double>(positives) * static_cast<double>(tp) /
            static_cast<double>(taken);
  }
  return ap;
}

double auprc(std::span<const Prediction> preds, double horizon_months) {
  check_predictions(preds);
  const auto labels = horizon_labels(preds, horizon_months);
  std::vector<double> scores;
  std::vector<int> y;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] == HorizonLabel::excluded) continue;
    scores.push_back(preds[i].risk);
    y.push_back(labels[i] == HorizonLabel::positive ? 1 : 0);
  }
  return average_precision(scores, y);
}

double kaplan_meier(std::span<const double> time, std::span<const int> event, double t) {
  if (time.size() != event.size()) throw DataError("time and event counts differ");
  if (time.empty()) throw DataError("Kaplan-Meier needs at least one patient");
  std::vector<std::size_t> order(time.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return time[a] < time[b]; });
  double surv = 1.0;
  std::size_t at_risk = time.size();
  std::size_t k = 0;
  while (k < order.size() && time[order[k]] <= t) {
    const double s = time[order[k]];
    std::size_t deaths = 0, leaving = 0;
    for (; k < order.size() && time[order[k]] == s; ++k, ++leaving)
      if (event[order[k]] != 0) ++deaths;
    surv *= 1.0 - static_cast<double>(deaths) / static_cast<double>(at_risk);
    at_risk -= leaving;
  }
  return surv;
}

Calibration calibration_curve_and_ici(std::span<const Prediction> preds, double horizon_months, int grid_points) {
  check_predictions(preds);
  if (preds.size() < 50) throw DataError("calibration needs at least 50 patients");
  if (grid_points < 2) throw UsageError("calibration grid needs at least two points");
  const std::size_t n = preds.size();
  std::vector<double> g(n), time(n);
  std::vector<int> event(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = preds[i].risk;
    if (!(r > 0.0 && r < 1.0)) throw DataError("calibration needs risks strictly inside (0, 1)");
    g[i] = cloglog(r);
    time[i] = preds[i].event_time_months;
    event[i] = preds[i].event_indicator;
  }
  const Spline spline{percentile(g, 0.1), percentile(g, 0.5), percentile(g, 0.9)};
  const double spread = std::max(1.0, std::abs(spline.k3 - spline.k1));
  if (spline.k2 - spline.k1 <= 1e-9 * spread || spline.k3 - spline.k2 <= 1e-9 * spread)
    throw DataError("degenerate predictions");

  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), 2);
  for (std::size_t i = 0; i < n; ++i) x.row(static_cast<Eigen::Index>(i)) = spline(g[i]).transpose();
  const auto model = cph_fit(x, time, event, {"g", "g_spline"});

  Calibration out;
  out.observed.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out.observed[i] = cph_predict(model, x.row(static_cast<Eigen::Index>(i)).transpose(), horizon_months);
    total += std::abs(out.observed[i] - preds[i].risk);
  }
  out.ici = total / static_cast<double>(n);

  const auto [lo, hi] = std::minmax_element(preds.begin(), preds.end(),
                                            [](const Prediction& a, const Prediction& b) { return a.risk < b.risk; });
  for (int k = 0; k < grid_points; ++k) {
    const double r = lo->risk + (hi->risk - lo->risk) * k / (grid_points - 1);
    out.curve.push_back({r, cph_predict(model, spline(cloglog(r)), horizon_months)});
  }
  return out;
}

std::vector<DecisionPoint> decision_curve(std::span<const Prediction> preds, double horizon_months,
                                          std::span<const double> thresholds) {
  check_predictions(preds);
  if (preds.empty()) throw DataError("decision curve needs at least one patient");
  const std::size_t n = preds.size();
  std::vector<double> time(n);
  std::vector<int> event(n);
  for (std::size_t i = 0; i < n; ++i) {
    time[i] = preds[i].event_time_months;
    event[i] = preds[i].event_indicator;
  }
  const double km_all = kaplan_meier(time, event, horizon_months);
  std::vector<DecisionPoint> out;
  for (double pt : thresholds) {
    if (!(pt > 0.0 && pt < 1.0)) throw UsageError("decision thresholds must lie in (0, 1)");
    const double odds = pt / (1.0 - pt);
    DecisionPoint d;
    d.threshold = pt;
    d.treat_all = (1.0 - km_all) - km_all * odds;
    std::vector<double> gt;
    std::vector<int> ge;
    for (std::size_t i = 0; i < n; ++i) {
      if (preds[i].risk >= pt) {
        gt.push_back(time[i]);
        ge.push_back(event[i]);
      }
    }
    if (gt.empty()) {
      d.empty_group = true;
    } else {
      const double km = kaplan_meier(gt, ge, horizon_months);
      const double frac = static_cast<double>(gt.size()) / static_cast<double>(n);
      d.net_benefit = frac * (1.0 - km) - frac * km * odds;
    }
    out.push_back(d);
  }
  return out;
}

ImpactCounts impact_from_counts(std::int64_t predicted_positive, std::int64_t false_positive,
                                std::int64_t false_negative) {
  if (predicted_positive < 0 || false_positive < 0 || false_negative < 0 || false_positive > predicted_positive)
    throw DataError("inconsistent confusion counts");
  ImpactCounts c;
  c.predicted_positive = predicted_positive;
  c.false_positive = false_positive;
  c.false_negative = false_negative;
  c.true_positive = predicted_positive - false_positive;
  c.ppv = predicted_positive > 0 ? static_cast<double>(c.true_positive) / static_cast<double>(predicted_positive)
                                 : std::nan("");
  const std::int64_t events = c.true_positive + false_negative;
  c.sensitivity = events > 0 ? static_cast<double>(c.true_positive) / static_cast<double>(events) : std::nan("");
  return c;
}

ImpactCounts impact_analysis(std::span<const Prediction> preds, double horizon_months, double threshold) {
  check_predictions(preds);
  const auto labels = horizon_labels(preds, horizon_months);
  std::int64_t pp = 0, fp = 0, fn = 0, classifiable = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] == HorizonLabel::excluded) continue;
    ++classifiable;
    const bool flagged = preds[i].risk >= threshold;
    const bool positive = labels[i] == HorizonLabel::positive;
    if (flagged) ++pp;
    if (flagged && !positive) ++fp;
    if (!flagged && positive) ++fn;
  }
  if (classifiable == 0) throw DataError("no classifiable patients at the horizon");
  return impact_from_counts(pp, fp, fn);
}

MetricReport evaluate(std::span<const Prediction> preds, const MetricOptions& options) {
  check_predictions(preds);
  MetricReport report;
  report.horizon_months = options.horizon_months;
  report.n = preds.size();
  auto attempt = [&](const char* name, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      report.errors[name] = e.what();
    }
  };
  attempt("c_index", [&] {
    report.c_index = c_index(preds, options.bootstrap_replicates, options.bootstrap_seed, options.threads);
  });
  attempt("auprc", [&] { report.auprc = auprc(preds, options.horizon_months); });
  attempt("calibration", [&] {
    report.calibration = calibration_curve_and_ici(preds, options.horizon_months, options.calibration_grid);
  });
  attempt("decision_curve", [&] {
    std::vector<double> thresholds = options.decision_thresholds;
    if (thresholds.empty())
      for (int k = 1; k < 100; ++k) thresholds.push_back(k / 100.0);
    report.decision = decision_curve(preds, options.horizon_months, thresholds);
  });
  attempt("impact", [&] { report.impact = impact_analysis(preds, options.horizon_months, options.impact_threshold); });
  return report;
}

void write_report(const std::filesystem::path& dir, const MetricReport& report) {
  using nlohmann::json;
  std::filesystem::create_directories(dir);
  json j;
  j["horizon_months"] = report.horizon_months;
  j["n"] = report.n;
  if (report.c_index)
    j["c_index"] = {{"value", report.c_index->value}, {"ci_low", report.c_index->ci_low},
                    {"ci_high", report.c_index->ci_high}};
  if (report.auprc) j["auprc"] = *report.auprc;
  if (report.calibration) j["ici"] = report.calibration->ici;
  if (report.impact) {
    const auto& c = *report.impact;
    j["impact"] = {{"predicted_positive", c.predicted_positive}, {"tp", c.true_positive}, {"fp", c.false_positive},
                   {"fn", c.false_negative}, {"ppv", c.ppv}, {"sensitivity", c.sensitivity}};
  }
  if (report.decision) {
    json dc = json::array();
    for (const auto& d : *report.decision)
      dc.push_back({{"threshold", d.threshold}, {"net_benefit", d.net_benefit}, {"treat_all", d.treat_all},
                    {"treat_none", d.treat_none}, {"empty_group", d.empty_group}});
    j["decision_curve"] = dc;
  }
  j["errors"] = report.errors;
  std::ofstream(dir / "report.json") << j.dump(2) << "\n";

  std::ofstream summary(dir / "summary.txt");
  summary << "horizon_months\t" << fixed3(report.horizon_months) << "\n";
  summary << "patients\t" << report.n << "\n";
  if (report.c_index)
    summary << "c_index\t" << fixed3(report.c_index->value) << " (" << fixed3(report.c_index->ci_low) << ", "
            << fixed3(report.c_index->ci_high) << ")\n";
  if (report.auprc) summary << "auprc\t" << fixed3(*report.auprc) << "\n";
  if (report.calibration) summary << "ici\t" << fixed3(report.calibration->ici) << "\n";
  if (report.impact) {
    const auto& c = *report.impact;
    summary << "predicted_positive\t" << c.predicted_positive << "\n"
            << "true_positive\t" << c.true_positive << "\n"
            << "false_positive\t" << c.false_positive << "\n"
            << "false_negative\t" << c.false_negative << "\n"
            << "ppv\t" << fixed3(c.ppv) << "\n"
            << "sensitivity\t" << fixed3(c.sensitivity) << "\n";
  }
  for (const auto& [metric, message] : report.errors) summary << "error\t" << metric << "\t" << message << "\n";

  if (report.calibration) {
    std::ofstream csv(dir / "calibration.csv");
    csv << "predicted,observed\n";
    for (const auto& p : report.calibration->curve) csv << format_double(p.predicted) << ',' << format_double(p.observed) << '\n';
  }
  if (report.decision) {
    std::ofstream csv(dir / "decision_curve.csv");
    csv << "threshold,net_benefit,treat_all,treat_none\n";
    for (const auto& d : *report.decision)
      csv << format_double(d.threshold) << ',' << format_double(d.net_benefit) << ',' << format_double(d.treat_all)
          << ',' << format_double(d.treat_none) << '\n';
  }
}

}  // namespace trisk
