#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "trisk/ehr_data.hpp"
#include "trisk/losses.hpp"
#include "trisk/model.hpp"

namespace trisk {

struct TrainConfig {
  double learning_rate = 8e-5;
  double weight_decay = 0.02;
  double warmup_proportion = 0.1;
  double lr_decay = 0.95;  // per epoch once warmup ends
  int batch_size = 32;
  int max_epochs = 50;
  int patience = 3;
  std::uint64_t seed = 1;
  double eval_split_fraction = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int threads = 0;  // 0 = hardware concurrency

  void validate() const;  // throws UsageError
  bool operator==(const TrainConfig&) const = default;
};

struct OptimizerState {
  Gradients first_moment;
  Gradients second_moment;
  std::int64_t step = 0;

  bool empty() const { return first_moment.empty(); }
  bool operator==(const OptimizerState&) const = default;
};

struct EpochRecord {
  int epoch = 0;  // 0 = before any update
  double train_loss = 0.0;
  double heldout_loss = 0.0;
  double learning_rate = 0.0;
  bool operator==(const EpochRecord&) const = default;
};

/// Everything needed to resume or deploy a model.
struct Checkpoint {
  Vocabulary vocab;
  std::unique_ptr<TriskModel> model;
  OptimizerState optimizer;
  int epoch = 0;
  double best_validation_loss = 0.0;
  std::vector<EpochRecord> history;

  Checkpoint() = default;
  Checkpoint(Vocabulary vocab, const ModelConfig& config, const HeadConfig& head, std::uint64_t seed);
  Checkpoint(const Checkpoint& other);
  Checkpoint& operator=(const Checkpoint& other);
  Checkpoint(Checkpoint&&) noexcept = default;
  Checkpoint& operator=(Checkpoint&&) noexcept = default;
};

/// Learning rate at a global step: linear warmup from 0 to the peak over
/// warmup_proportion of the planned steps, then exponential decay per epoch.
double learning_rate_at(const TrainConfig& config, std::int64_t step, std::int64_t steps_per_epoch);

/// One AdamW update with decoupled weight decay (also scaled by the rate).
void adam_step(ParameterSet& params, const Gradients& grads, OptimizerState& state, const TrainConfig& config,
               double learning_rate);

/// Per-subject outputs needed by the loss, from one forward pass.
struct SubjectForward {
  std::unique_ptr<ad::Tape> tape;
  ad::Var latent;
  OdeHead::Trace trace;
  EventPoint event;
};

/// Forward pass for one patient; builds a differentiable graph when
/// `grads` is non-null.
SubjectForward forward_subject(const TriskModel& model, const TokenizedSequence& seq, double event_time,
                               bool interpolate, Gradients* grads, Rng* dropout);

/// Evaluation-mode curves for a set of sequences.
std::vector<SurvivalCurve> predict_curves(const TriskModel& model, std::span<const TokenizedSequence> seqs,
                                          int threads = 0);

struct Outcome {
  double time_months = 0.0;
  int event_indicator = 0;
};

std::vector<Outcome> outcomes(std::span<const PatientRecord> cohort);

/// Mean total loss (no dropout) over a set; xcal is taken over the whole set.
BatchLoss evaluate_loss(const TriskModel& model, std::span<const TokenizedSequence> seqs,
                        std::span<const Outcome> outcomes, const LossConfig& loss, int threads = 0);

/// Loss over one batch with parameter gradients added into `grads`. The
/// batch is split into a fixed number of chunks whose gradients are summed
/// in order, so results do not depend on the thread count.
BatchLoss batch_gradients(const TriskModel& model, std::span<const TokenizedSequence> seqs,
                          std::span<const Outcome> outcomes, const LossConfig& loss, Gradients& grads,
                          std::uint64_t dropout_seed, bool train_mode, int threads = 0);

std::vector<TokenizedSequence> tokenize_cohort(std::span<const PatientRecord> cohort, const Vocabulary& vocab,
                                               int max_len);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam training with end-of-epoch held-out evaluation and patience-based
/// early stopping. Returns the checkpoint of the best held-out epoch.
Checkpoint train(std::span<const PatientRecord> cohort, const Checkpoint& initial, const TrainConfig& config,
                 const LossConfig& loss, const EpochCallback& on_epoch = {});

/// Training defaults for fine-tuning (10% held out).
TrainConfig fine_tune_defaults();

/// Continues training pretrained weights on a new cohort with fresh
/// optimizer moments; new codes map onto the pretrained vocabulary (unseen
/// codes become UNK). Throws DataError("disjoint vocabularies") when no
/// clinical code is shared.
Checkpoint fine_tune(const Checkpoint& pretrained, std::span<const PatientRecord> cohort, TrainConfig config,
                     const LossConfig& loss, const EpochCallback& on_epoch = {});

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace trisk
