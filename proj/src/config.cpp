#include "trisk/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "trisk/error.hpp"

namespace trisk {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw UsageError("invalid value for " + key + ": " + text);
  return v;
}

long long to_integer(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw UsageError("invalid value for " + key + ": " + text);
  return v;
}

bool to_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "True") return true;
  if (text == "false" || text == "0" || text == "False") return false;
  throw UsageError("invalid value for " + key + ": " + text);
}

std::vector<double> to_list(const std::string& key, const std::string& text) {
  std::vector<double> out;
  std::istringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_double(key, item));
  }
  return out;
}

std::string list_text(const std::vector<double>& values) {
  std::string s;
  for (double v : values) {
    if (!s.empty()) s += ",";
    s += format_double(v);
  }
  return s;
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

template <class Get, class Set>
SettingKey make(std::string key, std::string help, Get get, Set set) {
  return {std::move(key), std::move(help), std::move(get), std::move(set)};
}

#define TRISK_REAL(KEY, FIELD, HELP)                                                                    \
  make(KEY, HELP, [](const Settings& s) { return format_double(s.FIELD); },                             \
       [](Settings& s, const std::string& v) { s.FIELD = to_double(KEY, v); })
#define TRISK_INT(KEY, FIELD, HELP)                                                                     \
  make(KEY, HELP, [](const Settings& s) { return std::to_string(s.FIELD); },                            \
       [](Settings& s, const std::string& v) { s.FIELD = static_cast<decltype(s.FIELD)>(to_integer(KEY, v)); })
#define TRISK_BOOL(KEY, FIELD, HELP)                                                                    \
  make(KEY, HELP, [](const Settings& s) { return bool_text(s.FIELD); },                                 \
       [](Settings& s, const std::string& v) { s.FIELD = to_bool(KEY, v); })
#define TRISK_LIST(KEY, FIELD, HELP)                                                                    \
  make(KEY, HELP, [](const Settings& s) { return list_text(s.FIELD); },                                 \
       [](Settings& s, const std::string& v) { s.FIELD = to_list(KEY, v); })

std::vector<SettingKey> build_keys() {
  std::vector<SettingKey> k;
  // encoder
  k.push_back(TRISK_INT("n_layers", model.n_layers, "encoder layers"));
  k.push_back(TRISK_INT("max_seq_len", model.max_seq_len, "tokens per patient including PRED"));
  k.push_back(TRISK_INT("hidden_size", model.hidden_size, "embedding and hidden width"));
  k.push_back(TRISK_REAL("hidden_dropout", model.hidden_dropout, "hidden dropout probability"));
  k.push_back(TRISK_REAL("attention_dropout", model.attention_dropout, "attention dropout probability"));
  k.push_back(TRISK_INT("n_heads", model.n_heads, "attention heads"));
  k.push_back(TRISK_INT("intermediate_size", model.intermediate_size, "feed-forward width"));
  k.push_back(TRISK_INT("pooler_size", model.pooler_size, "pooled latent width"));
  k.push_back(TRISK_INT("max_age_months", model.max_age_months, "largest embeddable age in months"));
  k.push_back(TRISK_INT("max_visits", model.max_visits, "rows of the visit position table"));
  k.push_back(TRISK_REAL("layer_norm_eps", model.layer_norm_eps, "layer normalisation epsilon"));
  k.push_back(TRISK_REAL("init_std", model.init_std, "weight initialisation standard deviation"));
  // survival head
  k.push_back(TRISK_INT("ode_hidden", head.hidden, "rate network width"));
  k.push_back(TRISK_INT("substeps_per_month", head.substeps_per_month, "RK4 steps per month"));
  k.push_back(TRISK_INT("ode_horizon_months", head.horizon_months, "survival grid length in months"));
  k.push_back(TRISK_BOOL("use_cumhaz_input", head.use_cumhaz_input, "feed the cumulative hazard to the rate network"));
  k.push_back(TRISK_REAL("initial_hazard", head.initial_hazard, "monthly hazard of an untrained head"));
  // loss
  k.push_back(TRISK_REAL("lambda_xcal", loss.lambda_xcal, "weight of the calibration term"));
  k.push_back(TRISK_INT("dcal_bins", loss.dcal_bins, "D-calibration bins"));
  k.push_back(TRISK_BOOL("interpolation", loss.interpolation, "interpolate the cumulative hazard between months"));
  k.push_back(TRISK_REAL("soft_bin_temperature", loss.soft_bin_temperature, "sharpness of soft bin edges"));
  // training
  k.push_back(TRISK_REAL("learning_rate", train.learning_rate, "peak learning rate"));
  k.push_back(TRISK_REAL("weight_decay", train.weight_decay, "decoupled weight decay"));
  k.push_back(TRISK_REAL("warmup_proportion", train.warmup_proportion, "share of planned steps spent warming up"));
  k.push_back(TRISK_REAL("lr_decay", train.lr_decay, "learning-rate factor per epoch after warmup"));
  k.push_back(TRISK_INT("batch_size", train.batch_size, "patients per step"));
  k.push_back(TRISK_INT("max_epochs", train.max_epochs, "epoch limit"));
  k.push_back(TRISK_INT("patience", train.patience, "epochs without held-out improvement before stopping"));
  k.push_back(make(
      "seed", "seed for training and synthesis", [](const Settings& s) { return std::to_string(s.train.seed); },
      [](Settings& s, const std::string& v) {
        const auto seed = static_cast<std::uint64_t>(to_integer("seed", v));
        s.train.seed = seed;
        s.synth.seed = seed;
      }));
  k.push_back(TRISK_REAL("eval_split_fraction", train.eval_split_fraction, "held-out share; finetune defaults to 0.1"));
  k.push_back(TRISK_REAL("adam_beta1", train.adam_beta1, "first-moment decay"));
  k.push_back(TRISK_REAL("adam_beta2", train.adam_beta2, "second-moment decay"));
  k.push_back(TRISK_REAL("adam_eps", train.adam_eps, "Adam denominator epsilon"));
  k.push_back(make(
      "threads", "worker cap, 0 for all cores", [](const Settings& s) { return std::to_string(s.train.threads); },
      [](Settings& s, const std::string& v) {
        const auto t = static_cast<int>(to_integer("threads", v));
        s.train.threads = t;
        s.explain.threads = t;
        s.metrics.threads = t;
      }));
  k.push_back(TRISK_REAL("min_prevalence", min_prevalence, "vocabulary prevalence floor"));
  // evaluation
  k.push_back(make(
      "horizon", "prediction horizon in months for eval and explain",
      [](const Settings& s) { return format_double(s.metrics.horizon_months); },
      [](Settings& s, const std::string& v) {
        const double h = to_double("horizon", v);
        s.metrics.horizon_months = h;
        s.explain.horizon_months = h;
      }));
  k.push_back(TRISK_REAL("impact_threshold", metrics.impact_threshold, "risk threshold of the impact analysis"));
  k.push_back(TRISK_INT("bootstrap_replicates", metrics.bootstrap_replicates, "C-index bootstrap replicates"));
  k.push_back(TRISK_INT("bootstrap_seed", metrics.bootstrap_seed, "C-index bootstrap seed"));
  k.push_back(TRISK_LIST("decision_thresholds", metrics.decision_thresholds, "comma list; empty for 0.01..0.99"));
  k.push_back(TRISK_INT("calibration_grid", metrics.calibration_grid, "points on the calibration curve"));
  // attribution
  k.push_back(TRISK_INT("ig_steps", explain.ig_steps, "integrated-gradient steps"));
  k.push_back(TRISK_REAL("prevalence_floor", explain.prevalence_floor, "minimum share of patients per reported code"));
  k.push_back(TRISK_LIST("age_bins_years", explain.age_bins_years, "age-at-first-recording stratum edges"));
  k.push_back(TRISK_LIST("years_to_baseline_bins", explain.years_to_baseline_bins, "first-recording-to-baseline stratum edges"));
  k.push_back(TRISK_INT("top_k", explain.top_k, "length of the ranking table"));
  // synthesis
  k.push_back(TRISK_INT("n", synth.n_patients, "synthetic patients"));
  k.push_back(make(
      "risk_codes", "comma list of CODE:prevalence:log_hr",
      [](const Settings& s) { return format_risk_codes(s.synth.risk_codes); },
      [](Settings& s, const std::string& v) { s.synth.risk_codes = parse_risk_codes(v); }));
  k.push_back(TRISK_REAL("baseline_hazard_per_month", synth.baseline_hazard_per_month, "synthetic baseline hazard"));
  k.push_back(TRISK_REAL("censoring_hazard_per_month", synth.censoring_hazard_per_month, "synthetic censoring hazard"));
  k.push_back(TRISK_REAL("mean_visits", synth.mean_visits, "mean synthetic visit count"));
  k.push_back(TRISK_REAL("follow_up_months", synth.horizon_months, "administrative censoring time"));
  k.push_back(TRISK_INT("n_background_codes", synth.n_background_codes, "codes with no effect"));
  k.push_back(TRISK_REAL("background_prevalence", synth.background_prevalence, "prevalence of each background code"));
  k.push_back(TRISK_REAL("mean_repeats", synth.mean_repeats, "mean extra recordings of an assigned code"));
  return k;
}

#undef TRISK_REAL
#undef TRISK_INT
#undef TRISK_BOOL
#undef TRISK_LIST

}  // namespace

Settings::Settings() {
  synth.risk_codes = {{"D0001", 0.5, std::log(4.0)}, {"D0002", 0.5, std::log(2.0)}};
}

const std::vector<SettingKey>& setting_keys() {
  static const std::vector<SettingKey> keys = build_keys();
  return keys;
}

std::map<std::string, std::string> parse_key_values(std::istream& in) {
  std::map<std::string, std::string> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("invalid config line " + std::to_string(line_no));
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw UsageError("invalid config line " + std::to_string(line_no));
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path.string());
  return parse_key_values(in);
}

void set_value(Settings& settings, const std::string& key, const std::string& value) {
  for (const auto& k : setting_keys()) {
    if (k.key == key) {
      k.set(settings, value);
      return;
    }
  }
  throw UsageError("unknown config key: " + key);
}

std::string get_value(const Settings& settings, const std::string& key) {
  for (const auto& k : setting_keys())
    if (k.key == key) return k.get(settings);
  throw UsageError("unknown config key: " + key);
}

void apply(Settings& settings, const std::map<std::string, std::string>& values) {
  for (const auto& [key, value] : values) set_value(settings, key, value);
}

void write_settings(std::ostream& out, const Settings& settings) {
  for (const auto& k : setting_keys()) out << k.key << " = " << k.get(settings) << "\n";
}

std::vector<RiskCode> parse_risk_codes(const std::string& text) {
  std::vector<RiskCode> out;
  std::istringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (item.empty()) continue;
    const auto a = item.find(':');
    const auto b = item.find(':', a == std::string::npos ? a : a + 1);
    if (a == std::string::npos || b == std::string::npos) throw UsageError("invalid risk code entry: " + item);
    RiskCode rc;
    rc.code = item.substr(0, a);
    rc.prevalence = to_double("risk_codes", item.substr(a + 1, b - a - 1));
    const auto hr = item.substr(b + 1);
    rc.log_hazard_ratio = hr.rfind("log", 0) == 0 ? std::log(to_double("risk_codes", hr.substr(3)))
                                                  : to_double("risk_codes", hr);
    out.push_back(rc);
  }
  return out;
}

std::string format_risk_codes(const std::vector<RiskCode>& codes) {
  std::string s;
  for (const auto& c : codes) {
    if (!s.empty()) s += ",";
    s += c.code + ":" + format_double(c.prevalence) + ":" + format_double(c.log_hazard_ratio);
  }
  return s;
}

}  // namespace trisk
