#include "trisk/cph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "trisk/error.hpp"

namespace trisk {

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_number(const std::string& text, const std::string& field, std::size_t line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.empty() || !std::isfinite(v))
    throw DataError("invalid " + field + " at line " + std::to_string(line));
  return v;
}

CovariateType parse_type(const std::string& s) {
  if (s == "binary") return CovariateType::binary;
  if (s == "continuous") return CovariateType::continuous;
  if (s == "categorical") return CovariateType::categorical;
  throw UsageError("unknown covariate type: " + s);
}

std::string type_name(CovariateType t) {
  switch (t) {
    case CovariateType::binary: return "binary";
    case CovariateType::continuous: return "continuous";
    case CovariateType::categorical: return "categorical";
  }
  return "continuous";
}

// Risk-set sums for one pass over the data, visited by descending time.
struct Pass {
  double loglik = 0.0;
  Eigen::VectorXd score;
  Eigen::MatrixXd info;
};

Pass breslow_pass(const Eigen::MatrixXd& xc, std::span<const double> times, std::span<const int> events,
                  const std::vector<std::size_t>& desc, const Eigen::VectorXd& beta, bool derivatives) {
  const Eigen::Index p = xc.cols();
  Pass out;
  out.score = Eigen::VectorXd::Zero(p);
  out.info = Eigen::MatrixXd::Zero(p, p);
  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);
  const Eigen::VectorXd eta = xc * beta;
  std::size_t k = 0;
  while (k < desc.size()) {
    const double t = times[desc[k]];
    std::size_t end = k;
    int deaths = 0;
    Eigen::VectorXd event_x = Eigen::VectorXd::Zero(p);
    double event_eta = 0.0;
    for (; end < desc.size() && times[desc[end]] == t; ++end) {
      const std::size_t i = desc[end];
      const double w = std::exp(eta(static_cast<Eigen::Index>(i)));
      const auto row = xc.row(static_cast<Eigen::Index>(i)).transpose();
      s0 += w;
      if (derivatives) {
        s1 += w * row;
        s2.noalias() += w * row * row.transpose();
      }
      if (events[i] != 0) {
        ++deaths;
        event_eta += eta(static_cast<Eigen::Index>(i));
        if (derivatives) event_x += row;
      }
    }
    if (deaths > 0) {
      out.loglik += event_eta - deaths * std::log(s0);
      if (derivatives) {
        const Eigen::VectorXd mean = s1 / s0;
        out.score += event_x - deaths * mean;
        out.info += deaths * (s2 / s0 - mean * mean.transpose());
      }
    }
    k = end;
  }
  return out;
}

std::vector<std::size_t> descending_order(std::span<const double> times) {
  std::vector<std::size_t> idx(times.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });
  return idx;
}

void check_outcomes(std::size_t n, std::span<const double> times, std::span<const int> events) {
  if (times.size() != n || events.size() != n) throw DataError("design, times and events differ in length");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(times[i]) || times[i] < 0.0) throw DataError("invalid time at row " + std::to_string(i + 1));
    if (events[i] != 0 && events[i] != 1) throw DataError("invalid event at row " + std::to_string(i + 1));
  }
}

}  // namespace

void CovariateSpec::validate() const {
  std::set<std::string> seen;
  for (const auto& c : covariates) {
    if (c.name.empty()) throw UsageError("covariate with empty name");
    if (!seen.insert(c.name).second) throw UsageError("duplicate covariate " + c.name);
  }
  for (const auto& [a, b] : interactions)
    if (!seen.count(a) || !seen.count(b)) throw UsageError("interaction references undeclared covariate");
}

DesignTable read_design(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty design file");
  const auto header = split(trim(line), ',');
  int time_col = -1, event_col = -1, id_col = -1;
  DesignTable table;
  std::vector<int> covariate_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto name = trim(header[c]);
    if (name == "time") time_col = static_cast<int>(c);
    else if (name == "event") event_col = static_cast<int>(c);
    else if (name == "patient_id") id_col = static_cast<int>(c);
    else {
      table.columns.push_back(name);
      covariate_cols.push_back(static_cast<int>(c));
    }
  }
  if (time_col < 0 || event_col < 0) throw DataError("design header needs time and event columns");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    const auto fields = split(line, ',');
    if (fields.size() != header.size()) throw DataError("invalid field count at line " + std::to_string(line_no));
    std::vector<std::string> row;
    row.reserve(covariate_cols.size());
    for (int c : covariate_cols) row.push_back(trim(fields[static_cast<std::size_t>(c)]));
    table.cells.push_back(std::move(row));
    table.times.push_back(parse_number(trim(fields[static_cast<std::size_t>(time_col)]), "time", line_no));
    const double ev = parse_number(trim(fields[static_cast<std::size_t>(event_col)]), "event", line_no);
    if (ev != 0.0 && ev != 1.0) throw DataError("invalid event at line " + std::to_string(line_no));
    table.events.push_back(static_cast<int>(ev));
    table.ids.push_back(id_col >= 0 ? trim(fields[static_cast<std::size_t>(id_col)]) : std::to_string(line_no - 1));
  }
  return table;
}

CovariateSpec infer_spec(const DesignTable& table) {
  CovariateSpec spec;
  for (std::size_t c = 0; c < table.columns.size(); ++c) {
    bool binary = true;
    for (const auto& row : table.cells)
      if (row[c] != "0" && row[c] != "1") binary = false;
    spec.covariates.push_back({table.columns[c], binary ? CovariateType::binary : CovariateType::continuous, {}, {}});
  }
  return spec;
}

CovariateSpec read_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  CovariateSpec spec;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    std::istringstream words(line);
    std::string a, b, c;
    words >> a >> b >> c;
    if (a == "interaction") {
      if (b.empty() || c.empty()) throw UsageError("interaction needs two covariates");
      spec.interactions.emplace_back(b, c);
    } else {
      spec.covariates.push_back({a, parse_type(b), c, {}});
    }
  }
  spec.validate();
  return spec;
}

ExpandedDesign expand(CovariateSpec& spec, const DesignTable& table) {
  spec.validate();
  const auto n = static_cast<Eigen::Index>(table.rows());
  std::vector<Eigen::VectorXd> columns;
  ExpandedDesign out;
  std::vector<std::vector<std::size_t>> produced(spec.covariates.size());
  for (std::size_t k = 0; k < spec.covariates.size(); ++k) {
    auto& cov = spec.covariates[k];
    const auto it = std::find(table.columns.begin(), table.columns.end(), cov.name);
    if (it == table.columns.end()) throw DataError("design has no column " + cov.name);
    const auto c = static_cast<std::size_t>(it - table.columns.begin());
    if (cov.type == CovariateType::categorical) {
      if (cov.levels.empty()) {
        std::set<std::string> levels;
        for (const auto& row : table.cells) levels.insert(row[c]);
        cov.levels.assign(levels.begin(), levels.end());
      }
      if (cov.reference.empty()) cov.reference = cov.levels.front();
      if (std::find(cov.levels.begin(), cov.levels.end(), cov.reference) == cov.levels.end())
        throw DataError("reference level " + cov.reference + " absent from " + cov.name);
      for (const auto& level : cov.levels) {
        if (level == cov.reference) continue;
        Eigen::VectorXd col(n);
        for (Eigen::Index i = 0; i < n; ++i) col(i) = table.cells[static_cast<std::size_t>(i)][c] == level ? 1.0 : 0.0;
        produced[k].push_back(columns.size());
        columns.push_back(std::move(col));
        out.names.push_back(cov.name + "=" + level);
      }
      for (const auto& row : table.cells)
        if (std::find(cov.levels.begin(), cov.levels.end(), row[c]) == cov.levels.end())
          throw DataError("unknown level " + row[c] + " of " + cov.name);
    } else {
      Eigen::VectorXd col(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double v = parse_number(table.cells[static_cast<std::size_t>(i)][c], cov.name, static_cast<std::size_t>(i) + 2);
        if (cov.type == CovariateType::binary && v != 0.0 && v != 1.0)
          throw DataError("invalid " + cov.name + " at line " + std::to_string(i + 2));
        col(i) = v;
      }
      produced[k].push_back(columns.size());
      columns.push_back(std::move(col));
      out.names.push_back(cov.name);
    }
  }
  auto position = [&](const std::string& name) {
    for (std::size_t k = 0; k < spec.covariates.size(); ++k)
      if (spec.covariates[k].name == name) return k;
    throw UsageError("interaction references undeclared covariate");
  };
  for (const auto& [a, b] : spec.interactions) {
    for (std::size_t ca : produced[position(a)]) {
      for (std::size_t cb : produced[position(b)]) {
        columns.push_back(columns[ca].cwiseProduct(columns[cb]));
        out.names.push_back(out.names[ca] + ":" + out.names[cb]);
      }
    }
  }
  out.x.resize(n, static_cast<Eigen::Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j) out.x.col(static_cast<Eigen::Index>(j)) = columns[j];
  return out;
}

double CphModel::cumulative_baseline(double t) const {
  const auto it = std::upper_bound(baseline_times.begin(), baseline_times.end(), t);
  if (it == baseline_times.begin()) return 0.0;
  return baseline_cumhaz[static_cast<std::size_t>(it - baseline_times.begin()) - 1];
}

double partial_log_likelihood(const Eigen::MatrixXd& x, std::span<const double> times, std::span<const int> events,
                              const Eigen::VectorXd& beta) {
  check_outcomes(static_cast<std::size_t>(x.rows()), times, events);
  if (beta.size() != x.cols()) throw UsageError("coefficient count does not match the design");
  return breslow_pass(x, times, events, descending_order(times), beta, false).loglik;
}

CphModel cph_fit(const Eigen::MatrixXd& x, std::span<const double> times, std::span<const int> events,
                 std::vector<std::string> names, const CphOptions& options) {
  const auto n = static_cast<std::size_t>(x.rows());
  const Eigen::Index p = x.cols();
  check_outcomes(n, times, events);
  if (names.empty())
    for (Eigen::Index j = 0; j < p; ++j) names.push_back("x" + std::to_string(j + 1));
  if (static_cast<Eigen::Index>(names.size()) != p) throw UsageError("column names do not match the design");
  if (static_cast<Eigen::Index>(n) <= p) throw DataError("need more patients than covariates");
  if (std::none_of(events.begin(), events.end(), [](int e) { return e != 0; })) throw DataError("no events");
  if (!x.allFinite()) throw DataError("non-finite covariate value");

  CphModel model;
  model.names = names;
  model.means = p > 0 ? Eigen::VectorXd(x.colwise().mean().transpose()) : Eigen::VectorXd();
  const Eigen::MatrixXd xc = x.rowwise() - model.means.transpose();

  if (p > 0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xc);
    qr.setThreshold(1e-10);
    if (qr.rank() < p) {
      std::string cols;
      for (Eigen::Index k = qr.rank(); k < p; ++k) {
        if (!cols.empty()) cols += ", ";
        cols += names[static_cast<std::size_t>(qr.colsPermutation().indices()(k))];
      }
      throw DataError("singular information matrix: collinear or constant columns " + cols);
    }
  }

  const auto desc = descending_order(times);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  Pass pass = breslow_pass(xc, times, events, desc, beta, true);
  std::ostringstream trace;
  int iter = 0;
  auto max_score = [](const Pass& ps) { return ps.score.size() ? ps.score.cwiseAbs().maxCoeff() : 0.0; };
  while (max_score(pass) >= options.score_tolerance) {
    trace << "iteration " << iter << ": loglik " << pass.loglik << ", max|score| " << max_score(pass) << "\n";
    if (iter >= options.max_iterations)
      throw NumericalError("Cox fit did not converge in " + std::to_string(options.max_iterations) +
                           " iterations\n" + trace.str());
    ++iter;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(pass.info);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
      throw NumericalError("information matrix not positive definite\n" + trace.str());
    Eigen::VectorXd step = ldlt.solve(pass.score);
    Pass next = breslow_pass(xc, times, events, desc, beta + step, true);
    int halvings = 0;
    const double noise = 1e-12 * std::abs(pass.loglik);
    while (!(next.loglik >= pass.loglik - noise) && halvings < 30) {
      step *= 0.5;
      ++halvings;
      next = breslow_pass(xc, times, events, desc, beta + step, true);
    }
    if (!std::isfinite(next.loglik)) throw NumericalError("non-finite partial likelihood\n" + trace.str());
    beta += step;
    pass = std::move(next);
  }
  model.beta = beta;
  model.log_likelihood = pass.loglik;
  model.iterations = iter;

  // Breslow baseline at the fitted coefficients, ascending event times.
  const Eigen::VectorXd risk = (xc * beta).array().exp();
  std::vector<std::size_t> asc(desc.rbegin(), desc.rend());
  double at_risk = risk.sum();
  double cum = 0.0;
  std::size_t k = 0;
  while (k < asc.size()) {
    const double t = times[asc[k]];
    std::size_t end = k;
    int deaths = 0;
    double leaving = 0.0;
    for (; end < asc.size() && times[asc[end]] == t; ++end) {
      deaths += events[asc[end]];
      leaving += risk(static_cast<Eigen::Index>(asc[end]));
    }
    if (deaths > 0) {
      cum += deaths / at_risk;
      model.baseline_times.push_back(t);
      model.baseline_cumhaz.push_back(cum);
    }
    at_risk -= leaving;
    k = end;
  }
  return model;
}

double cph_predict(const CphModel& model, const Eigen::VectorXd& x, double horizon_months) {
  if (x.size() != model.beta.size()) throw UsageError("covariate row has the wrong dimension");
  if (!(horizon_months >= 0.0)) throw UsageError("horizon must be non-negative");
  const double lp = model.beta.size() ? (x - model.means).dot(model.beta) : 0.0;
  return 1.0 - std::exp(-model.cumulative_baseline(horizon_months) * std::exp(lp));
}

void save_cph(const std::filesystem::path& path, const CphModel& model, const CovariateSpec& spec) {
  using nlohmann::json;
  json j;
  j["names"] = model.names;
  j["beta"] = std::vector<double>(model.beta.data(), model.beta.data() + model.beta.size());
  j["means"] = std::vector<double>(model.means.data(), model.means.data() + model.means.size());
  j["baseline_times"] = model.baseline_times;
  j["baseline_cumhaz"] = model.baseline_cumhaz;
  j["log_likelihood"] = model.log_likelihood;
  j["iterations"] = model.iterations;
  json covs = json::array();
  for (const auto& c : spec.covariates)
    covs.push_back({{"name", c.name}, {"type", type_name(c.type)}, {"reference", c.reference}, {"levels", c.levels}});
  j["covariates"] = covs;
  json inter = json::array();
  for (const auto& [a, b] : spec.interactions) inter.push_back({a, b});
  j["interactions"] = inter;
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
}

CphModel load_cph(const std::filesystem::path& path, CovariateSpec* spec) {
  using nlohmann::json;
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    const json j = json::parse(in);
    CphModel m;
    m.names = j.at("names").get<std::vector<std::string>>();
    const auto beta = j.at("beta").get<std::vector<double>>();
    const auto means = j.at("means").get<std::vector<double>>();
    m.beta = Eigen::Map<const Eigen::VectorXd>(beta.data(), static_cast<Eigen::Index>(beta.size()));
    m.means = Eigen::Map<const Eigen::VectorXd>(means.data(), static_cast<Eigen::Index>(means.size()));
    m.baseline_times = j.at("baseline_times").get<std::vector<double>>();
    m.baseline_cumhaz = j.at("baseline_cumhaz").get<std::vector<double>>();
    m.log_likelihood = j.at("log_likelihood").get<double>();
    m.iterations = j.at("iterations").get<int>();
    if (m.beta.size() != m.means.size() || m.names.size() != static_cast<std::size_t>(m.beta.size()) ||
        m.baseline_times.size() != m.baseline_cumhaz.size())
      throw DataError("inconsistent Cox model file");
    if (spec) {
      spec->covariates.clear();
      spec->interactions.clear();
      for (const auto& c : j.at("covariates"))
        spec->covariates.push_back({c.at("name").get<std::string>(), parse_type(c.at("type").get<std::string>()),
                                    c.at("reference").get<std::string>(),
                                    c.at("levels").get<std::vector<std::string>>()});
      for (const auto& pair : j.at("interactions"))
        spec->interactions.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<std::string>());
    }
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("invalid Cox model file: ") + e.what());
  }
}

}  // namespace trisk
