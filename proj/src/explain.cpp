#include "trisk/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "trisk/error.hpp"
#include "trisk/trainer.hpp"

namespace trisk {

void AttributionConfig::validate() const {
  if (ig_steps < 2) throw UsageError("ig_steps must be at least 2");
  if (!(horizon_months > 0.0)) throw UsageError("horizon_months must be positive");
  if (!(prevalence_floor >= 0.0 && prevalence_floor < 1.0)) throw UsageError("prevalence_floor must lie in [0, 1)");
  if (!std::is_sorted(age_bins_years.begin(), age_bins_years.end()) ||
      !std::is_sorted(years_to_baseline_bins.begin(), years_to_baseline_bins.end()))
    throw UsageError("stratum edges must be increasing");
  if (top_k < 1) throw UsageError("top_k must be positive");
}

Matrix integrated_gradients(const Matrix& input, const GradientFn& f, int steps) {
  if (steps < 1) throw UsageError("integrated gradients needs at least one step");
  Matrix total = Matrix::Zero(input.rows(), input.cols());
  Matrix grad;
  for (int k = 0; k < steps; ++k) {
    const double alpha = (k + 0.5) / steps;
    grad.setZero(input.rows(), input.cols());
    f(alpha * input, grad);
    if (!grad.allFinite()) throw NumericalError("non-finite gradient");
    total += grad;
  }
  return input.cwiseProduct(total / steps);
}

double risk_from_embedding(const TriskModel& model, const Matrix& embedded, std::span<const char> key_mask,
                           Eigen::Index pred, double horizon_months, Matrix* grad) {
  ad::Tape tape;
  ForwardGraph graph(tape, model, nullptr, nullptr);
  const ad::Var in = tape.input(embedded);
  const ad::Var z = graph.pool(graph.encode(graph.project(in), key_mask), pred);
  const OdeHead head(model.params(), model.head(), model.head_config());
  const auto trace = head.integrate(tape.value(z).row(0).transpose());
  const double cum = cumulative_hazard_at(trace.curve, horizon_months);
  const double risk = -std::expm1(-cum);
  if (grad) {
    // d risk / d L(H) = exp(-L(H)), spread over the two grid points.
    const auto ev = head.event_point(trace, horizon_months, true);
    HeadSeeds seeds;
    seeds.grid.assign(trace.curve.cum_hazard.size(), 0.0);
    const double d = std::exp(-cum);
    seeds.grid[static_cast<std::size_t>(ev.lower)] += (1.0 - ev.weight) * d;
    seeds.grid[static_cast<std::size_t>(ev.lower) + 1] += ev.weight * d;
    const Vector dz = head.backward(trace, nullptr, seeds, nullptr);
    tape.backward(z, dz.transpose());
    *grad = tape.grad(in);
  }
  return risk;
}

TokenAttribution ig_patient(const TokenizedSequence& seq, const TriskModel& model, const AttributionConfig& config) {
  config.validate();
  ad::Tape tape;
  ForwardGraph graph(tape, model, nullptr, nullptr);
  const Matrix embedded = tape.value(graph.lookup(seq));
  const auto mask = key_mask(seq);
  const Eigen::Index pred = pred_index(seq);
  const GradientFn f = [&](const Matrix& point, Matrix& grad) {
    return risk_from_embedding(model, point, mask, pred, config.horizon_months, &grad);
  };
  const Matrix ig = integrated_gradients(embedded, f, config.ig_steps);
  TokenAttribution out;
  out.contributions.resize(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) out.contributions[i] = ig.row(static_cast<Eigen::Index>(i)).sum();
  out.risk = risk_from_embedding(model, embedded, mask, pred, config.horizon_months, nullptr);
  out.baseline_risk =
      risk_from_embedding(model, Matrix::Zero(embedded.rows(), embedded.cols()), mask, pred, config.horizon_months, nullptr);
  return out;
}

PatientAttribution attribute_patient(const PatientRecord& patient, const Vocabulary& vocab, const TriskModel& model,
                                     const AttributionConfig& config) {
  const auto seq = tokenize(patient, vocab, model.config().max_seq_len);
  const auto ig = ig_patient(seq, model, config);
  PatientAttribution out;
  out.patient_id = patient.patient_id;
  out.sex = patient.sex;
  out.baseline_age_months = patient.baseline_age_months;
  out.risk = ig.risk;
  out.baseline_risk = ig.baseline_risk;
  std::map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const int id = seq.token_ids[i];
    const double c = ig.contributions[i];
    if (id == Vocabulary::kSep) {
      out.sep += c;
    } else if (id == Vocabulary::kPred) {
      out.pred += c;
    } else if (id == Vocabulary::kUnk) {
      out.unk += c;
    } else if (id >= Vocabulary::kReserved) {
      const auto& code = vocab.token(id);
      const auto [it, fresh] = slot.emplace(code, out.codes.size());
      if (fresh) out.codes.push_back({code, c, seq.ages_months[i]});
      else {
        auto& entry = out.codes[it->second];
        entry.contribution = std::max(entry.contribution, c);
        entry.first_age_months = std::min(entry.first_age_months, seq.ages_months[i]);
      }
    }
  }
  return out;
}

std::vector<PatientAttribution> attribute_cohort(std::span<const PatientRecord> cohort, const Vocabulary& vocab,
                                                 const TriskModel& model, const AttributionConfig& config) {
  config.validate();
  std::vector<PatientAttribution> out(cohort.size());
  parallel_for(cohort.size(), config.threads,
               [&](std::size_t i) { out[i] = attribute_patient(cohort[i], vocab, model, config); });
  return out;
}

namespace {

std::string bin_label(const std::string& prefix, const std::vector<double>& edges, double value) {
  const auto fmt = [](double v) { return format_double(v); };
  for (std::size_t k = 0; k < edges.size(); ++k) {
    if (value < edges[k]) return prefix + "=" + (k == 0 ? "<" + fmt(edges[0]) : fmt(edges[k - 1]) + "-" + fmt(edges[k]));
  }
  return prefix + "=" + (edges.empty() ? std::string("all") : ">=" + fmt(edges.back()));
}

std::vector<std::string> all_bins(const std::string& prefix, const std::vector<double>& edges) {
  std::vector<std::string> labels;
  if (edges.empty()) return {prefix + "=all"};
  labels.push_back(bin_label(prefix, edges, edges.front() - 1.0));
  for (std::size_t k = 1; k < edges.size(); ++k) labels.push_back(bin_label(prefix, edges, edges[k - 1]));
  labels.push_back(bin_label(prefix, edges, edges.back()));
  return labels;
}

AttributionRow summarise(const std::string& code, const std::string& stratum, const std::vector<double>& values) {
  AttributionRow row;
  row.code = code;
  row.stratum = stratum;
  row.count = static_cast<int>(values.size());
  double sum = 0.0;
  for (double v : values) sum += v;
  row.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - row.mean) * (v - row.mean);
  const double sd = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
  const double half = 1.96 * sd / std::sqrt(static_cast<double>(values.size()));
  row.ci_low = row.mean - half;
  row.ci_high = row.mean + half;
  return row;
}

}  // namespace

AttributionReport aggregate(std::span<const PatientAttribution> patients, const AttributionConfig& config) {
  config.validate();
  if (patients.empty()) throw DataError("no patients to aggregate");
  const double floor_count = config.prevalence_floor * static_cast<double>(patients.size());

  // Patients are visited in id order so the reduction does not depend on
  // the order they were supplied in.
  std::vector<const PatientAttribution*> ordered;
  for (const auto& p : patients) ordered.push_back(&p);
  std::sort(ordered.begin(), ordered.end(),
            [](const PatientAttribution* a, const PatientAttribution* b) { return a->patient_id < b->patient_id; });

  std::vector<std::string> strata = {"all", "sex=female", "sex=male"};
  for (const auto& s : all_bins("age_first", config.age_bins_years)) strata.push_back(s);
  for (const auto& s : all_bins("years_to_baseline", config.years_to_baseline_bins)) strata.push_back(s);

  std::map<std::string, std::map<std::string, std::vector<double>>> values;  // code -> stratum -> values
  for (const auto* p : ordered) {
    for (const auto& c : p->codes) {
      auto& by_stratum = values[c.code];
      by_stratum["all"].push_back(c.contribution);
      by_stratum[std::string("sex=") + std::string(to_string(p->sex))].push_back(c.contribution);
      by_stratum[bin_label("age_first", config.age_bins_years, c.first_age_months / 12.0)].push_back(c.contribution);
      by_stratum[bin_label("years_to_baseline", config.years_to_baseline_bins,
                           (p->baseline_age_months - c.first_age_months) / 12.0)]
          .push_back(c.contribution);
    }
  }

  AttributionReport report;
  for (const auto& [code, by_stratum] : values) {
    if (static_cast<double>(by_stratum.at("all").size()) < floor_count - 1e-9) continue;
    for (const auto& stratum : strata) {
      const auto it = by_stratum.find(stratum);
      if (it == by_stratum.end()) {
        report.omitted_strata.push_back(code + "|" + stratum);
        continue;
      }
      report.rows.push_back(summarise(code, stratum, it->second));
    }
  }
  for (const auto& row : report.rows)
    if (row.stratum == "all") report.top.push_back(row);
  std::stable_sort(report.top.begin(), report.top.end(),
                   [](const AttributionRow& a, const AttributionRow& b) { return a.mean > b.mean; });
  if (report.top.size() > static_cast<std::size_t>(config.top_k)) report.top.resize(static_cast<std::size_t>(config.top_k));

  std::vector<double> sep, pred, unk;
  for (const auto* p : ordered) {
    sep.push_back(p->sep);
    pred.push_back(p->pred);
    unk.push_back(p->unk);
  }
  report.special.push_back(summarise("[SEP]", "all", sep));
  report.special.push_back(summarise("[PRED]", "all", pred));
  report.special.push_back(summarise("[UNK]", "all", unk));
  return report;
}

void write_attribution_report(const std::filesystem::path& dir, const AttributionReport& report) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "attributions.csv");
  if (!csv) throw DataError("cannot write " + (dir / "attributions.csv").string());
  csv << "code,stratum,mean_contribution,ci_low,ci_high,count\n";
  auto emit = [&](const AttributionRow& r) {
    csv << r.code << ',' << r.stratum << ',' << format_double(r.mean) << ',' << format_double(r.ci_low) << ','
        << format_double(r.ci_high) << ',' << r.count << '\n';
  };
  for (const auto& r : report.rows) emit(r);
  for (const auto& r : report.special) emit(r);

  std::ofstream top(dir / "top_k.tsv");
  top << "rank\tcode\tmean_contribution\tci_low\tci_high\tcount\n";
  for (std::size_t k = 0; k < report.top.size(); ++k) {
    const auto& r = report.top[k];
    top << k + 1 << '\t' << r.code << '\t' << format_double(r.mean) << '\t' << format_double(r.ci_low) << '\t'
        << format_double(r.ci_high) << '\t' << r.count << '\n';
  }
  if (!report.omitted_strata.empty()) {
    std::ofstream omitted(dir / "omitted_strata.txt");
    for (const auto& s : report.omitted_strata) omitted << s << '\n';
  }
}

}  // namespace trisk
