#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace trisk {

enum class Sex { male, female };

std::string_view to_string(Sex sex);
Sex parse_sex(std::string_view text);  // throws DataError

/// One clinical record. The code's first character gives its modality:
/// D (diagnosis), M (medication) or P (procedure).
struct EncounterRecord {
  std::string code;
  int age_months = 0;
  int visit_index = 1;

  bool operator==(const EncounterRecord&) const = default;
};

struct PatientRecord {
  std::string patient_id;
  Sex sex = Sex::female;
  int baseline_age_months = 0;
  double event_time_months = 0.0;  // from baseline
  int event_indicator = 0;         // 1 = death observed, 0 = censored
  std::vector<EncounterRecord> encounters;

  bool operator==(const PatientRecord&) const = default;
};

/// Longest follow-up a record may carry after truncation.
inline constexpr double kFollowUpMonths = 48.0;

/// Throws DataError describing the first violated invariant.
void validate(const PatientRecord& patient);

/// Dense token ids. The four reserved tokens occupy ids 0-3; clinical codes
/// follow in lexicographic order.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kSep = 1;
  static constexpr int kPred = 2;
  static constexpr int kUnk = 3;
  static constexpr int kReserved = 4;

  Vocabulary();
  /// Reserved tokens plus `codes` (sorted and de-duplicated here).
  static Vocabulary from_codes(std::vector<std::string> codes);

  int size() const { return static_cast<int>(tokens_.size()); }
  /// Id of a token; unknown clinical codes map to UNK.
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::vector<std::string> clinical_codes() const;

  /// FNV-1a over the token list; identifies the id assignment.
  std::uint64_t hash() const;

  struct ModalityCounts {
    int diagnosis = 0;
    int medication = 0;
    int procedure = 0;
  };
  ModalityCounts modality_counts() const;

  void write(std::ostream& out) const;
  void write(const std::filesystem::path& path) const;
  static Vocabulary read(std::istream& in);
  static Vocabulary read(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

std::string_view reserved_token_name(int id);
bool is_reserved(int id);

/// Codes present in at least `min_prevalence` of patients.
Vocabulary build_vocabulary(std::span<const PatientRecord> cohort, double min_prevalence);

/// Aligned token / age / visit arrays; always ends in PRED.
struct TokenizedSequence {
  std::vector<int> token_ids;
  std::vector<int> ages_months;
  std::vector<int> visit_positions;

  std::size_t size() const { return token_ids.size(); }
  bool operator==(const TokenizedSequence&) const = default;
};

/// Visits are emitted oldest first, each closed by SEP; PRED carries the
/// baseline age and visit V+1. When the stream exceeds `max_len`, the oldest
/// tokens are dropped so the newest max_len-1 tokens plus PRED remain.
TokenizedSequence tokenize(const PatientRecord& patient, const Vocabulary& vocab, int max_len);

/// Cohort file: one tab-separated patient per line,
/// `id  sex  baseline_age  event_time  event_indicator  visit:code:age;...`.
std::vector<PatientRecord> parse_cohort(std::istream& in);
std::vector<PatientRecord> read_cohort(const std::filesystem::path& path);
void write_cohort(std::ostream& out, std::span<const PatientRecord> cohort);
void write_cohort(const std::filesystem::path& path, std::span<const PatientRecord> cohort);

/// Shortest decimal text that round-trips the double exactly.
std::string format_double(double value);

}  // namespace trisk
