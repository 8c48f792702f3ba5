#include "trisk/ehr_data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "trisk/error.hpp"

namespace trisk {
namespace {

constexpr std::array<std::string_view, Vocabulary::kReserved> kReservedNames = {
    "[PAD]", "[SEP]", "[PRED]", "[UNK]"};

std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(text.substr(start));
      break;
    }
    parts.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
  return parts;
}

template <class T>
bool parse_number(std::string_view text, T& out) {
  if (text.empty()) return false;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size();
}

[[noreturn]] void fail_field(std::string_view field, std::size_t line) {
  throw DataError("invalid " + std::string(field) + " at line " + std::to_string(line));
}

bool valid_code(std::string_view code) {
  return code.size() >= 2 && (code[0] == 'D' || code[0] == 'M' || code[0] == 'P') &&
         code.find_first_of(":;\t \n") == std::string_view::npos;
}

}  // namespace

std::string_view to_string(Sex sex) { return sex == Sex::male ? "male" : "female"; }

Sex parse_sex(std::string_view text) {
  if (text == "male") return Sex::male;
  if (text == "female") return Sex::female;
  throw DataError("invalid sex '" + std::string(text) + "'");
}

void validate(const PatientRecord& patient) {
  const auto fail = [&](const std::string& what) {
    throw DataError("patient " + patient.patient_id + ": " + what);
  };
  if (patient.patient_id.empty()) fail("empty patient_id");
  if (patient.baseline_age_months < 0) fail("negative baseline age");
  if (!(patient.event_time_months >= 0.0 && patient.event_time_months <= kFollowUpMonths))
    fail("event_time_months outside [0, 48]");
  if (patient.event_indicator != 0 && patient.event_indicator != 1) fail("invalid event_indicator");
  int last_visit = 0;
  for (const auto& e : patient.encounters) {
    if (!valid_code(e.code)) fail("invalid code '" + e.code + "'");
    if (e.age_months < 0) fail("negative encounter age");
    if (e.age_months > patient.baseline_age_months) fail("encounter after baseline");
    if (e.visit_index < 1) fail("visit_index < 1");
    if (e.visit_index < last_visit) fail("encounters not ordered by visit");
    last_visit = e.visit_index;
  }
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  for (int i = 0; i < kReserved; ++i) {
    tokens_.emplace_back(kReservedNames[static_cast<std::size_t>(i)]);
    ids_.emplace(tokens_.back(), i);
  }
}

Vocabulary Vocabulary::from_codes(std::vector<std::string> codes) {
  std::sort(codes.begin(), codes.end());
  codes.erase(std::unique(codes.begin(), codes.end()), codes.end());
  Vocabulary vocab;
  for (auto& code : codes) {
    if (!valid_code(code)) throw DataError("invalid vocabulary code '" + code + "'");
    vocab.ids_.emplace(code, vocab.size());
    vocab.tokens_.push_back(std::move(code));
  }
  return vocab;
}

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return ids_.count(std::string(token)) != 0;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw DataError("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> Vocabulary::clinical_codes() const {
  return {tokens_.begin() + kReserved, tokens_.end()};
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& token : tokens_) {
    for (unsigned char c : token) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    h ^= 0xff;  // separator
    h *= 0x100000001b3ULL;
  }
  return h;
}

Vocabulary::ModalityCounts Vocabulary::modality_counts() const {
  ModalityCounts counts;
  for (std::size_t i = kReserved; i < tokens_.size(); ++i) {
    switch (tokens_[i][0]) {
      case 'D': ++counts.diagnosis; break;
      case 'M': ++counts.medication; break;
      case 'P': ++counts.procedure; break;
      default: break;
    }
  }
  return counts;
}

void Vocabulary::write(std::ostream& out) const {
  for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
}

void Vocabulary::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write(out);
}

Vocabulary Vocabulary::read(std::istream& in) {
  std::vector<std::string> codes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    int id = -1;
    if (fields.size() != 2 || !parse_number(fields[1], id)) fail_field("vocabulary entry", line_no);
    if (id != static_cast<int>(line_no) - 1) fail_field("vocabulary id", line_no);
    if (id < kReserved) {
      if (fields[0] != kReservedNames[static_cast<std::size_t>(id)]) fail_field("reserved token", line_no);
    } else {
      codes.emplace_back(fields[0]);
    }
  }
  if (!std::is_sorted(codes.begin(), codes.end())) throw DataError("vocabulary codes not in lexicographic order");
  return from_codes(std::move(codes));
}

Vocabulary Vocabulary::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read(in);
}

std::string_view reserved_token_name(int id) {
  return kReservedNames.at(static_cast<std::size_t>(id));
}

bool is_reserved(int id) { return id >= 0 && id < Vocabulary::kReserved; }

Vocabulary build_vocabulary(std::span<const PatientRecord> cohort, double min_prevalence) {
  if (cohort.empty()) throw DataError("empty cohort");
  if (!(min_prevalence >= 0.0 && min_prevalence < 1.0))
    throw UsageError("min_prevalence must lie in [0, 1)");
  std::map<std::string, std::size_t> patients_with_code;
  for (const auto& patient : cohort) {
    std::set<std::string_view> seen;
    for (const auto& e : patient.encounters) seen.insert(e.code);
    for (auto code : seen) ++patients_with_code[std::string(code)];
  }
  const double needed = min_prevalence * static_cast<double>(cohort.size());
  std::vector<std::string> codes;
  for (const auto& [code, count] : patients_with_code) {
    if (static_cast<double>(count) >= needed - 1e-9) codes.push_back(code);
  }
  return Vocabulary::from_codes(std::move(codes));
}

// ---------------------------------------------------------------------------
// Tokenizer

TokenizedSequence tokenize(const PatientRecord& patient, const Vocabulary& vocab, int max_len) {
  if (max_len < 2) throw UsageError("max_len must be at least 2");
  TokenizedSequence seq;
  const auto& enc = patient.encounters;
  int last_visit = 0;
  for (std::size_t i = 0; i < enc.size(); ++i) {
    const auto& e = enc[i];
    seq.token_ids.push_back(vocab.id(e.code));
    seq.ages_months.push_back(e.age_months);
    seq.visit_positions.push_back(e.visit_index);
    last_visit = e.visit_index;
    const bool visit_ends = i + 1 == enc.size() || enc[i + 1].visit_index != e.visit_index;
    if (visit_ends) {
      seq.token_ids.push_back(Vocabulary::kSep);
      seq.ages_months.push_back(e.age_months);
      seq.visit_positions.push_back(e.visit_index);
    }
  }
  const std::size_t keep = static_cast<std::size_t>(max_len) - 1;
  if (seq.size() > keep) {
    const auto drop = static_cast<std::ptrdiff_t>(seq.size() - keep);
    seq.token_ids.erase(seq.token_ids.begin(), seq.token_ids.begin() + drop);
    seq.ages_months.erase(seq.ages_months.begin(), seq.ages_months.begin() + drop);
    seq.visit_positions.erase(seq.visit_positions.begin(), seq.visit_positions.begin() + drop);
  }
  seq.token_ids.push_back(Vocabulary::kPred);
  seq.ages_months.push_back(patient.baseline_age_months);
  seq.visit_positions.push_back(last_visit + 1);
  return seq;
}

// ---------------------------------------------------------------------------
// Cohort files

std::string format_double(double value) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  if (ec != std::errc()) throw DataError("cannot format number");
  return std::string(buf.data(), ptr);
}

std::vector<PatientRecord> parse_cohort(std::istream& in) {
  std::vector<PatientRecord> cohort;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    if (fields.size() != 6) fail_field("field count", line_no);
    PatientRecord p;
    p.patient_id = std::string(fields[0]);
    if (p.patient_id.empty()) fail_field("patient_id", line_no);
    if (fields[1] == "male") {
      p.sex = Sex::male;
    } else if (fields[1] == "female") {
      p.sex = Sex::female;
    } else {
      fail_field("sex", line_no);
    }
    if (!parse_number(fields[2], p.baseline_age_months) || p.baseline_age_months < 0)
      fail_field("baseline_age_months", line_no);
    if (!parse_number(fields[3], p.event_time_months) || !(p.event_time_months >= 0.0) ||
        p.event_time_months > kFollowUpMonths)
      fail_field("event_time_months", line_no);
    if (!parse_number(fields[4], p.event_indicator) ||
        (p.event_indicator != 0 && p.event_indicator != 1))
      fail_field("event_indicator", line_no);
    if (!fields[5].empty()) {
      for (auto item : split(fields[5], ';')) {
        auto parts = split(item, ':');
        if (parts.size() != 3) fail_field("encounter", line_no);
        EncounterRecord e;
        if (!parse_number(parts[0], e.visit_index) || e.visit_index < 1) fail_field("visit_index", line_no);
        e.code = std::string(parts[1]);
        if (!valid_code(e.code)) fail_field("code", line_no);
        if (!parse_number(parts[2], e.age_months) || e.age_months < 0) fail_field("age_months", line_no);
        p.encounters.push_back(std::move(e));
      }
    }
    try {
      validate(p);
    } catch (const DataError& err) {
      throw DataError(std::string(err.what()) + " at line " + std::to_string(line_no));
    }
    cohort.push_back(std::move(p));
  }
  return cohort;
}

std::vector<PatientRecord> read_cohort(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return parse_cohort(in);
}

void write_cohort(std::ostream& out, std::span<const PatientRecord> cohort) {
  for (const auto& p : cohort) {
    out << p.patient_id << '\t' << to_string(p.sex) << '\t' << p.baseline_age_months << '\t'
        << format_double(p.event_time_months) << '\t' << p.event_indicator << '\t';
    for (std::size_t i = 0; i < p.encounters.size(); ++i) {
      const auto& e = p.encounters[i];
      if (i) out << ';';
      out << e.visit_index << ':' << e.code << ':' << e.age_months;
    }
    out << '\n';
  }
}

void write_cohort(const std::filesystem::path& path, std::span<const PatientRecord> cohort) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_cohort(out, cohort);
}

}  // namespace trisk
