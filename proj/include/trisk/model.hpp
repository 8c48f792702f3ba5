#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "trisk/autodiff.hpp"
#include "trisk/ehr_data.hpp"
#include "trisk/ode_head.hpp"
#include "trisk/parameters.hpp"
#include "trisk/rng.hpp"

namespace trisk {

/// Encoder hyperparameters; defaults are the published TRisk settings.
struct ModelConfig {
  int n_layers = 6;
  int max_seq_len = 512;
  int hidden_size = 150;
  double hidden_dropout = 0.3;
  double attention_dropout = 0.4;
  int n_heads = 6;
  int intermediate_size = 108;
  int pooler_size = 150;
  int max_age_months = 1320;  // age table covers 0-110 years
  int max_visits = 1024;      // rows of the fixed positional table
  double layer_norm_eps = 1e-12;
  double init_std = 0.02;

  void validate() const;  // throws UsageError
  bool operator==(const ModelConfig&) const = default;
};

struct EncoderLayerSlots {
  std::size_t query_w, query_b, key_w, key_b, value_w, value_b, attn_out_w, attn_out_b;
  std::size_t attn_norm_gain, attn_norm_bias;
  std::size_t ff_in_w, ff_in_b, ff_out_w, ff_out_b;
  std::size_t ff_norm_gain, ff_norm_bias;
};

struct EncoderSlots {
  std::size_t token_embedding, age_embedding, projection_w, projection_b;
  std::vector<EncoderLayerSlots> layers;
  std::size_t pooler_w, pooler_b;
};

/// Fixed sinusoidal table indexed by visit number.
Matrix sinusoidal_table(int rows, int dim);

/// Encoder plus survival head, with every learnable array in one
/// ParameterSet. Weight matrices are stored input-major (x * W).
class TriskModel {
 public:
  TriskModel(const ModelConfig& config, const HeadConfig& head_config, int vocab_size, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const HeadConfig& head_config() const { return head_config_; }
  int vocab_size() const { return vocab_size_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const EncoderSlots& encoder() const { return encoder_; }
  const HeadSlots& head() const { return head_; }
  const Matrix& position_table() const { return positions_; }

 private:
  ModelConfig config_;
  HeadConfig head_config_;
  int vocab_size_;
  ParameterSet params_;
  EncoderSlots encoder_;
  HeadSlots head_;
  Matrix positions_;
};

/// Per-tape state for building a forward graph. With `grads` set, parameter
/// gradients accumulate there on backward; with `dropout` set, dropout is
/// active (training mode).
class ForwardGraph {
 public:
  ForwardGraph(ad::Tape& tape, const TriskModel& model, Gradients* grads, Rng* dropout);

  ad::Tape& tape() { return tape_; }
  const TriskModel& model() const { return model_; }
  bool training() const { return dropout_ != nullptr; }
  ad::Var param(std::size_t slot);

  /// Optional capture of each layer's per-head attention probabilities.
  std::vector<Matrix>* attention_probe = nullptr;

  /// L x 3E concatenation [token | age | position] of looked-up rows.
  ad::Var lookup(const TokenizedSequence& seq);
  /// tanh(concat * W + b): the L x E input to the encoder.
  ad::Var project(ad::Var concat);
  ad::Var encode(ad::Var embedded, std::span<const char> key_mask);
  /// Pooled PRED row: tanh(h_pred * W_pool + b_pool), 1 x E.
  ad::Var pool(ad::Var encoded, Eigen::Index pred_index);
  /// lookup -> project -> (dropout) -> encode -> pool.
  ad::Var latent(const TokenizedSequence& seq);

 private:
  ad::Var dropout(ad::Var x, double rate);

  ad::Tape& tape_;
  const TriskModel& model_;
  Gradients* grads_;
  Rng* dropout_;
  std::vector<std::optional<ad::Var>> cache_;
};

/// Attention key mask: 1 for real tokens, 0 for PAD.
std::vector<char> key_mask(const TokenizedSequence& seq);
/// Index of the PRED token; throws DataError when absent.
Eigen::Index pred_index(const TokenizedSequence& seq);

// Value-level conveniences over ForwardGraph.
Matrix embed(const TokenizedSequence& seq, const TriskModel& model);
Matrix encode(const Matrix& embedded, const TriskModel& model, std::span<const char> key_mask,
              Rng* dropout = nullptr);
Vector latent(const TokenizedSequence& seq, const TriskModel& model, Rng* dropout = nullptr);

}  // namespace trisk
