#include "trisk/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>

#include <json.hpp>

#include "trisk/error.hpp"

namespace trisk {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'T', 'R', 'I', 'S', 'K', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <class T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof value);
  if (!in) throw DataError("truncated checkpoint");
  return value;
}

void write_matrix(std::ostream& out, const Matrix& m) {
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

void read_matrix(std::istream& in, Matrix& m) {
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) throw DataError("truncated checkpoint");
}

// Non-finite doubles are not representable in JSON, so reals go through text.
json real(double v) { return format_double(v); }

double real(const json& j) {
  const auto text = j.get<std::string>();
  try {
    return std::stod(text);
  } catch (const std::exception&) {
    if (text == "inf") return std::numeric_limits<double>::infinity();
    if (text == "-inf") return -std::numeric_limits<double>::infinity();
    if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
    throw DataError("invalid number in checkpoint header: " + text);
  }
}

json model_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},
          {"max_seq_len", c.max_seq_len},
          {"hidden_size", c.hidden_size},
          {"hidden_dropout", real(c.hidden_dropout)},
          {"attention_dropout", real(c.attention_dropout)},
          {"n_heads", c.n_heads},
          {"intermediate_size", c.intermediate_size},
          {"pooler_size", c.pooler_size},
          {"max_age_months", c.max_age_months},
          {"max_visits", c.max_visits},
          {"layer_norm_eps", real(c.layer_norm_eps)},
          {"init_std", real(c.init_std)}};
}

ModelConfig model_config(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.hidden_size = j.at("hidden_size").get<int>();
  c.hidden_dropout = real(j.at("hidden_dropout"));
  c.attention_dropout = real(j.at("attention_dropout"));
  c.n_heads = j.at("n_heads").get<int>();
  c.intermediate_size = j.at("intermediate_size").get<int>();
  c.pooler_size = j.at("pooler_size").get<int>();
  c.max_age_months = j.at("max_age_months").get<int>();
  c.max_visits = j.at("max_visits").get<int>();
  c.layer_norm_eps = real(j.at("layer_norm_eps"));
  c.init_std = real(j.at("init_std"));
  return c;
}

json head_json(const HeadConfig& c) {
  return {{"hidden", c.hidden},
          {"substeps_per_month", c.substeps_per_month},
          {"horizon_months", c.horizon_months},
          {"use_cumhaz_input", c.use_cumhaz_input},
          {"initial_hazard", real(c.initial_hazard)}};
}

HeadConfig head_config(const json& j) {
  HeadConfig c;
  c.hidden = j.at("hidden").get<int>();
  c.substeps_per_month = j.at("substeps_per_month").get<int>();
  c.horizon_months = j.at("horizon_months").get<int>();
  c.use_cumhaz_input = j.at("use_cumhaz_input").get<bool>();
  c.initial_hazard = real(j.at("initial_hazard"));
  return c;
}

}  // namespace

void save_checkpoint(std::ostream& out, const Checkpoint& ck) {
  if (!ck.model) throw UsageError("checkpoint has no model");
  const auto& params = ck.model->params();
  json header;
  header["model"] = model_json(ck.model->config());
  header["head"] = head_json(ck.model->head_config());
  header["vocabulary"] = ck.vocab.tokens();
  header["vocabulary_hash"] = std::to_string(ck.vocab.hash());
  header["epoch"] = ck.epoch;
  header["best_validation_loss"] = real(ck.best_validation_loss);
  header["optimizer_step"] = ck.optimizer.step;
  header["has_optimizer"] = !ck.optimizer.empty();
  json history = json::array();
  for (const auto& r : ck.history)
    history.push_back({{"epoch", r.epoch},
                       {"train_loss", real(r.train_loss)},
                       {"heldout_loss", real(r.heldout_loss)},
                       {"learning_rate", real(r.learning_rate)}});
  header["history"] = history;
  json layout = json::array();
  for (const auto& p : params)
    layout.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"decay", p.decay}});
  header["parameters"] = layout;

  const std::string text = header.dump();
  out.write(kMagic, sizeof kMagic);
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params) write_matrix(out, p.value);
  if (!ck.optimizer.empty()) {
    for (const auto& m : ck.optimizer.first_moment) write_matrix(out, m);
    for (const auto& v : ck.optimizer.second_moment) write_matrix(out, v);
  }
  if (!out) throw DataError("failed to write checkpoint");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  save_checkpoint(out, ck);
}

Checkpoint load_checkpoint(std::istream& in, const CheckpointLoadOptions& options) {
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw DataError("not a checkpoint file");
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto length = read_pod<std::uint64_t>(in);
  if (length > (1ULL << 30)) throw DataError("corrupt checkpoint header");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw DataError("truncated checkpoint");

  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("corrupt checkpoint header: ") + e.what());
  }

  try {
    auto vocab = Vocabulary::from_codes({});
    {
      const auto tokens = header.at("vocabulary").get<std::vector<std::string>>();
      std::vector<std::string> codes;
      for (std::size_t i = Vocabulary::kReserved; i < tokens.size(); ++i) codes.push_back(tokens[i]);
      vocab = Vocabulary::from_codes(std::move(codes));
      if (vocab.tokens() != tokens) throw DataError("checkpoint vocabulary is not in canonical order");
    }
    const auto stored_hash = std::stoull(header.at("vocabulary_hash").get<std::string>());
    if (stored_hash != vocab.hash()) throw DataError("checkpoint vocabulary hash is inconsistent");
    if (options.expected_vocab_hash && *options.expected_vocab_hash != stored_hash && !options.allow_vocab_mismatch)
      throw DataError("vocabulary hash mismatch");

    Checkpoint ck(std::move(vocab), model_config(header.at("model")), head_config(header.at("head")), 0);
    auto& params = ck.model->params();
    const auto& layout = header.at("parameters");
    if (layout.size() != params.size()) throw DataError("checkpoint parameter count does not match the model");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& entry = layout[i];
      auto& p = params[i];
      if (entry.at("name").get<std::string>() != p.name || entry.at("rows").get<Eigen::Index>() != p.value.rows() ||
          entry.at("cols").get<Eigen::Index>() != p.value.cols())
        throw DataError("checkpoint parameter layout does not match the model at " + p.name);
      read_matrix(in, p.value);
    }
    if (header.at("has_optimizer").get<bool>()) {
      ck.optimizer.first_moment = params.zeros_like();
      ck.optimizer.second_moment = params.zeros_like();
      for (auto& m : ck.optimizer.first_moment) read_matrix(in, m);
      for (auto& v : ck.optimizer.second_moment) read_matrix(in, v);
    }
    ck.optimizer.step = header.at("optimizer_step").get<std::int64_t>();
    ck.epoch = header.at("epoch").get<int>();
    ck.best_validation_loss = real(header.at("best_validation_loss"));
    for (const auto& r : header.at("history"))
      ck.history.push_back({r.at("epoch").get<int>(), real(r.at("train_loss")), real(r.at("heldout_loss")),
                            real(r.at("learning_rate"))});
    return ck;
  } catch (const json::exception& e) {
    throw DataError(std::string("corrupt checkpoint header: ") + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const CheckpointLoadOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return load_checkpoint(in, options);
}

}  // namespace trisk
