#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "trisk/explain.hpp"
#include "trisk/losses.hpp"
#include "trisk/metrics.hpp"
#include "trisk/model.hpp"
#include "trisk/synth.hpp"
#include "trisk/trainer.hpp"

namespace trisk {

/// Every tunable of every command, addressable by a flat key.
struct Settings {
  ModelConfig model;
  HeadConfig head;
  LossConfig loss;
  TrainConfig train;
  AttributionConfig explain;
  MetricOptions metrics;
  SynthConfig synth;
  double min_prevalence = 0.0;  // vocabulary filter

  Settings();
};

struct SettingKey {
  std::string key;
  std::string help;
  std::function<std::string(const Settings&)> get;
  std::function<void(Settings&, const std::string&)> set;  // throws UsageError
};

const std::vector<SettingKey>& setting_keys();

/// `key = value` lines; blank lines and text after '#' are ignored.
std::map<std::string, std::string> parse_key_values(std::istream& in);
std::map<std::string, std::string> read_key_values(const std::filesystem::path& path);

/// Throws UsageError("unknown config key: ...") for keys outside setting_keys().
void apply(Settings& settings, const std::map<std::string, std::string>& values);
void set_value(Settings& settings, const std::string& key, const std::string& value);
std::string get_value(const Settings& settings, const std::string& key);

/// Writes every key with its resolved value.
void write_settings(std::ostream& out, const Settings& settings);

std::vector<RiskCode> parse_risk_codes(const std::string& text);  // "CODE:prevalence:log_hr,..."
std::string format_risk_codes(const std::vector<RiskCode>& codes);

}  // namespace trisk
