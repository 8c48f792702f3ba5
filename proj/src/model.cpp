#include "trisk/model.hpp"

#include <cmath>
#include <string>

#include "trisk/error.hpp"

namespace trisk {

void ModelConfig::validate() const {
  if (n_layers < 0) throw UsageError("n_layers must be non-negative");
  if (hidden_size < 1 || n_heads < 1 || hidden_size % n_heads != 0)
    throw UsageError("hidden_size must be a positive multiple of n_heads");
  if (intermediate_size < 1) throw UsageError("intermediate_size must be positive");
  if (pooler_size < 1) throw UsageError("pooler_size must be positive");
  if (max_seq_len < 2) throw UsageError("max_seq_len must be at least 2");
  if (!(hidden_dropout >= 0.0 && hidden_dropout < 1.0)) throw UsageError("hidden_dropout must lie in [0, 1)");
  if (!(attention_dropout >= 0.0 && attention_dropout < 1.0))
    throw UsageError("attention_dropout must lie in [0, 1)");
  if (max_age_months < 1 || max_visits < 2) throw UsageError("embedding tables too small");
}

Matrix sinusoidal_table(int rows, int dim) {
  Matrix table(rows, dim);
  for (int pos = 0; pos < rows; ++pos) {
    for (int i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / dim);
      table(pos, i) = (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  }
  return table;
}

TriskModel::TriskModel(const ModelConfig& config, const HeadConfig& head_config, int vocab_size,
                       std::uint64_t seed)
    : config_(config), head_config_(head_config), vocab_size_(vocab_size) {
  config_.validate();
  head_config_.validate();
  if (vocab_size < Vocabulary::kReserved) throw UsageError("vocabulary smaller than the reserved set");
  Rng rng(seed);
  const int e = config_.hidden_size;
  const double sd = config_.init_std;
  auto normal = [&](int rows, int cols) {
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = sd * rng.normal();
    return m;
  };
  auto& p = params_;
  encoder_.token_embedding = p.add("embed.token", normal(vocab_size, e));
  encoder_.age_embedding = p.add("embed.age", normal(config_.max_age_months + 1, e));
  encoder_.projection_w = p.add("embed.projection_w", normal(3 * e, e));
  encoder_.projection_b = p.add("embed.projection_b", Matrix::Zero(1, e), false);
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    EncoderLayerSlots s{};
    s.query_w = p.add(pre + "query_w", normal(e, e));
    s.query_b = p.add(pre + "query_b", Matrix::Zero(1, e), false);
    s.key_w = p.add(pre + "key_w", normal(e, e));
    s.key_b = p.add(pre + "key_b", Matrix::Zero(1, e), false);
    s.value_w = p.add(pre + "value_w", normal(e, e));
    s.value_b = p.add(pre + "value_b", Matrix::Zero(1, e), false);
    s.attn_out_w = p.add(pre + "attn_out_w", normal(e, e));
    s.attn_out_b = p.add(pre + "attn_out_b", Matrix::Zero(1, e), false);
    s.attn_norm_gain = p.add(pre + "attn_norm_gain", Matrix::Ones(1, e), false);
    s.attn_norm_bias = p.add(pre + "attn_norm_bias", Matrix::Zero(1, e), false);
    s.ff_in_w = p.add(pre + "ff_in_w", normal(e, config_.intermediate_size));
    s.ff_in_b = p.add(pre + "ff_in_b", Matrix::Zero(1, config_.intermediate_size), false);
    s.ff_out_w = p.add(pre + "ff_out_w", normal(config_.intermediate_size, e));
    s.ff_out_b = p.add(pre + "ff_out_b", Matrix::Zero(1, e), false);
    s.ff_norm_gain = p.add(pre + "ff_norm_gain", Matrix::Ones(1, e), false);
    s.ff_norm_bias = p.add(pre + "ff_norm_bias", Matrix::Zero(1, e), false);
    encoder_.layers.push_back(s);
  }
  encoder_.pooler_w = p.add("pooler_w", normal(e, config_.pooler_size));
  encoder_.pooler_b = p.add("pooler_b", Matrix::Zero(1, config_.pooler_size), false);
  head_ = add_head_parameters(p, config_.pooler_size, head_config_, rng, sd);
  positions_ = sinusoidal_table(config_.max_visits, e);
}

// ---------------------------------------------------------------------------

ForwardGraph::ForwardGraph(ad::Tape& tape, const TriskModel& model, Gradients* grads, Rng* dropout)
    : tape_(tape), model_(model), grads_(grads), dropout_(dropout), cache_(model.params().size()) {}

ad::Var ForwardGraph::param(std::size_t slot) {
  auto& cached = cache_.at(slot);
  if (!cached) cached = tape_.parameter(model_.params()[slot].value, grads_ ? &(*grads_)[slot] : nullptr);
  return *cached;
}

ad::Var ForwardGraph::dropout(ad::Var x, double rate) {
  if (!dropout_ || rate <= 0.0) return x;
  const Matrix& v = tape_.value(x);
  Matrix mask(v.rows(), v.cols());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (Eigen::Index j = 0; j < mask.cols(); ++j)
    for (Eigen::Index i = 0; i < mask.rows(); ++i) mask(i, j) = dropout_->uniform() < rate ? 0.0 : keep_scale;
  return tape_.mask_multiply(x, mask);
}

ad::Var ForwardGraph::lookup(const TokenizedSequence& seq) {
  const auto& cfg = model_.config();
  const std::size_t n = seq.size();
  if (seq.ages_months.size() != n || seq.visit_positions.size() != n)
    throw DataError("tokenized arrays differ in length");
  if (n == 0) throw DataError("empty sequence");
  for (std::size_t i = 0; i < n; ++i) {
    if (seq.token_ids[i] < 0 || seq.token_ids[i] >= model_.vocab_size() || seq.ages_months[i] < 0 ||
        seq.ages_months[i] > cfg.max_age_months || seq.visit_positions[i] < 0 ||
        seq.visit_positions[i] >= cfg.max_visits)
      throw DataError("embedding index out of range");
  }
  const auto& enc = model_.encoder();
  ad::Var tokens = tape_.gather_rows(param(enc.token_embedding), seq.token_ids);
  ad::Var ages = tape_.gather_rows(param(enc.age_embedding), seq.ages_months);
  Matrix positions(static_cast<Eigen::Index>(n), cfg.hidden_size);
  for (std::size_t i = 0; i < n; ++i)
    positions.row(static_cast<Eigen::Index>(i)) = model_.position_table().row(seq.visit_positions[i]);
  ad::Var pos = tape_.constant(std::move(positions));
  const ad::Var parts[] = {tokens, ages, pos};
  return tape_.concat_cols(parts);
}

ad::Var ForwardGraph::project(ad::Var concat) {
  const auto& enc = model_.encoder();
  ad::Var mixed = tape_.add_row(tape_.matmul(concat, param(enc.projection_w)), param(enc.projection_b));
  return tape_.tanh(mixed);
}

ad::Var ForwardGraph::encode(ad::Var embedded, std::span<const char> mask) {
  const auto& cfg = model_.config();
  const int heads = cfg.n_heads;
  const int head_dim = cfg.hidden_size / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));
  auto& t = tape_;
  ad::Var x = embedded;
  for (const auto& s : model_.encoder().layers) {
    ad::Var q = t.add_row(t.matmul(x, param(s.query_w)), param(s.query_b));
    ad::Var k = t.add_row(t.matmul(x, param(s.key_w)), param(s.key_b));
    ad::Var v = t.add_row(t.matmul(x, param(s.value_w)), param(s.value_b));
    std::vector<ad::Var> contexts;
    contexts.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      ad::Var qh = t.slice_cols(q, h * head_dim, head_dim);
      ad::Var kh = t.slice_cols(k, h * head_dim, head_dim);
      ad::Var vh = t.slice_cols(v, h * head_dim, head_dim);
      ad::Var probs = t.masked_softmax(t.scale(t.matmul_nt(qh, kh), inv_sqrt_d), mask);
      if (attention_probe) attention_probe->push_back(t.value(probs));
      probs = dropout(probs, cfg.attention_dropout);
      contexts.push_back(t.matmul(probs, vh));
    }
    ad::Var attn = t.add_row(t.matmul(t.concat_cols(contexts), param(s.attn_out_w)), param(s.attn_out_b));
    attn = dropout(attn, cfg.hidden_dropout);
    x = t.layer_norm(t.add(x, attn), param(s.attn_norm_gain), param(s.attn_norm_bias), cfg.layer_norm_eps);
    ad::Var ff = t.gelu(t.add_row(t.matmul(x, param(s.ff_in_w)), param(s.ff_in_b)));
    ff = t.add_row(t.matmul(ff, param(s.ff_out_w)), param(s.ff_out_b));
    ff = dropout(ff, cfg.hidden_dropout);
    x = t.layer_norm(t.add(x, ff), param(s.ff_norm_gain), param(s.ff_norm_bias), cfg.layer_norm_eps);
  }
  return x;
}

ad::Var ForwardGraph::pool(ad::Var encoded, Eigen::Index pred) {
  const auto& enc = model_.encoder();
  ad::Var row = tape_.row(encoded, pred);
  return tape_.tanh(tape_.add_row(tape_.matmul(row, param(enc.pooler_w)), param(enc.pooler_b)));
}

ad::Var ForwardGraph::latent(const TokenizedSequence& seq) {
  const Eigen::Index pred = pred_index(seq);
  const auto mask = key_mask(seq);
  ad::Var embedded = dropout(project(lookup(seq)), model_.config().hidden_dropout);
  return pool(encode(embedded, mask), pred);
}

std::vector<char> key_mask(const TokenizedSequence& seq) {
  std::vector<char> mask(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) mask[i] = seq.token_ids[i] != Vocabulary::kPad;
  return mask;
}

Eigen::Index pred_index(const TokenizedSequence& seq) {
  for (std::size_t i = seq.size(); i-- > 0;)
    if (seq.token_ids[i] == Vocabulary::kPred) return static_cast<Eigen::Index>(i);
  throw DataError("sequence has no PRED token");
}

Matrix embed(const TokenizedSequence& seq, const TriskModel& model) {
  ad::Tape tape;
  ForwardGraph graph(tape, model, nullptr, nullptr);
  return tape.value(graph.project(graph.lookup(seq)));
}

Matrix encode(const Matrix& embedded, const TriskModel& model, std::span<const char> key_mask, Rng* dropout) {
  ad::Tape tape;
  ForwardGraph graph(tape, model, nullptr, dropout);
  return tape.value(graph.encode(tape.constant(embedded), key_mask));
}

Vector latent(const TokenizedSequence& seq, const TriskModel& model, Rng* dropout) {
  ad::Tape tape;
  ForwardGraph graph(tape, model, nullptr, dropout);
  return tape.value(graph.latent(seq)).row(0).transpose();
}

}  // namespace trisk
