#include "trisk/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <unordered_set>

#include "trisk/error.hpp"

namespace trisk {

namespace {

constexpr std::size_t kGradientChunks = 4;

constexpr std::uint64_t kSplitStream = 0x73706c6974ULL;
constexpr std::uint64_t kShuffleStream = 0x73687566ULL;
constexpr std::uint64_t kDropoutStream = 0x64726f70ULL;

int resolve_threads(int threads) {
  if (threads > 0) return threads;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw UsageError("weight_decay must be non-negative");
  if (!(warmup_proportion >= 0.0 && warmup_proportion <= 1.0)) throw UsageError("warmup_proportion must lie in [0, 1]");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw UsageError("lr_decay must lie in (0, 1]");
  if (batch_size < 1) throw UsageError("batch_size must be positive");
  if (max_epochs < 1) throw UsageError("max_epochs must be positive");
  if (patience < 1) throw UsageError("patience must be positive");
  if (!(eval_split_fraction > 0.0 && eval_split_fraction < 1.0))
    throw UsageError("eval_split_fraction must lie in (0, 1)");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw UsageError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw UsageError("adam_eps must be positive");
  if (threads < 0) throw UsageError("threads must be non-negative");
}

TrainConfig fine_tune_defaults() {
  TrainConfig c;
  c.eval_split_fraction = 0.1;
  return c;
}

Checkpoint::Checkpoint(Vocabulary v, const ModelConfig& config, const HeadConfig& head, std::uint64_t seed)
    : vocab(std::move(v)), model(std::make_unique<TriskModel>(config, head, vocab.size(), seed)) {}

Checkpoint::Checkpoint(const Checkpoint& other)
    : vocab(other.vocab),
      model(other.model ? std::make_unique<TriskModel>(*other.model) : nullptr),
      optimizer(other.optimizer),
      epoch(other.epoch),
      best_validation_loss(other.best_validation_loss),
      history(other.history) {}

Checkpoint& Checkpoint::operator=(const Checkpoint& other) {
  if (this != &other) {
    Checkpoint copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(resolve_threads(threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

double learning_rate_at(const TrainConfig& config, std::int64_t step, std::int64_t steps_per_epoch) {
  const double per_epoch = static_cast<double>(std::max<std::int64_t>(steps_per_epoch, 1));
  const double warmup = std::round(config.warmup_proportion * per_epoch * config.max_epochs);
  const double s = static_cast<double>(step);
  if (s < warmup) return config.learning_rate * s / warmup;
  return config.learning_rate * std::pow(config.lr_decay, (s - warmup) / per_epoch);
}

void adam_step(ParameterSet& params, const Gradients& grads, OptimizerState& state, const TrainConfig& config,
               double learning_rate) {
  if (grads.size() != params.size()) throw UsageError("gradient count does not match parameters");
  if (state.empty()) {
    state.first_moment = params.zeros_like();
    state.second_moment = params.zeros_like();
  }
  ++state.step;
  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = grads[i];
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseAbs2();
    Matrix update = (m / c1).array() / ((v / c2).array().sqrt() + config.adam_eps);
    if (p.decay) update += config.weight_decay * p.value;
    p.value -= learning_rate * update;
  }
}

std::vector<Outcome> outcomes(std::span<const PatientRecord> cohort) {
  std::vector<Outcome> out;
  out.reserve(cohort.size());
  for (const auto& p : cohort) out.push_back({p.event_time_months, p.event_indicator});
  return out;
}

std::vector<TokenizedSequence> tokenize_cohort(std::span<const PatientRecord> cohort, const Vocabulary& vocab,
                                               int max_len) {
  std::vector<TokenizedSequence> seqs;
  seqs.reserve(cohort.size());
  for (const auto& p : cohort) seqs.push_back(tokenize(p, vocab, max_len));
  return seqs;
}

SubjectForward forward_subject(const TriskModel& model, const TokenizedSequence& seq, double event_time,
                               bool interpolate, Gradients* grads, Rng* dropout) {
  SubjectForward out;
  out.tape = std::make_unique<ad::Tape>();
  ForwardGraph graph(*out.tape, model, grads, dropout);
  out.latent = graph.latent(seq);
  const OdeHead head(model.params(), model.head(), model.head_config());
  out.trace = head.integrate(out.tape->value(out.latent).row(0).transpose());
  out.event = head.event_point(out.trace, event_time, interpolate);
  return out;
}

std::vector<SurvivalCurve> predict_curves(const TriskModel& model, std::span<const TokenizedSequence> seqs,
                                          int threads) {
  std::vector<SurvivalCurve> curves(seqs.size());
  const OdeHead head(model.params(), model.head(), model.head_config());
  parallel_for(seqs.size(), threads, [&](std::size_t i) {
    const Vector z = latent(seqs[i], model);
    curves[i] = head.integrate(z).curve;
  });
  return curves;
}

BatchLoss evaluate_loss(const TriskModel& model, std::span<const TokenizedSequence> seqs,
                        std::span<const Outcome> outs, const LossConfig& loss, int threads) {
  if (seqs.size() != outs.size()) throw UsageError("sequence and outcome counts differ");
  std::vector<SubjectOutputs> subjects(seqs.size());
  const OdeHead head(model.params(), model.head(), model.head_config());
  parallel_for(seqs.size(), threads, [&](std::size_t i) {
    const auto trace = head.integrate(latent(seqs[i], model));
    const auto ev = head.event_point(trace, outs[i].time_months, loss.interpolation);
    subjects[i] = {ev.cum_hazard, ev.rate, outs[i].event_indicator};
  });
  return total_loss(subjects, loss);
}

BatchLoss batch_gradients(const TriskModel& model, std::span<const TokenizedSequence> seqs,
                          std::span<const Outcome> outs, const LossConfig& loss, Gradients& grads,
                          std::uint64_t dropout_seed, bool train_mode, int threads) {
  const std::size_t n = seqs.size();
  if (n != outs.size()) throw UsageError("sequence and outcome counts differ");
  if (n == 0) throw UsageError("empty batch");
  if (grads.size() != model.params().size()) grads = model.params().zeros_like();

  const std::size_t chunks = std::min(kGradientChunks, n);
  auto chunk_of = [&](std::size_t i) { return i * chunks / n; };
  std::vector<Gradients> chunk_grads(chunks);
  for (auto& g : chunk_grads) g = model.params().zeros_like();

  std::vector<SubjectForward> forwards(n);
  std::vector<Rng> dropout_rngs;
  dropout_rngs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) dropout_rngs.emplace_back(derive_seed(dropout_seed, i));

  parallel_for(n, threads, [&](std::size_t i) {
    forwards[i] = forward_subject(model, seqs[i], outs[i].time_months, loss.interpolation,
                                  &chunk_grads[chunk_of(i)], train_mode ? &dropout_rngs[i] : nullptr);
  });

  std::vector<SubjectOutputs> subjects(n);
  for (std::size_t i = 0; i < n; ++i)
    subjects[i] = {forwards[i].event.cum_hazard, forwards[i].event.rate, outs[i].event_indicator};
  BatchLoss result = total_loss(subjects, loss);

  const OdeHead head(model.params(), model.head(), model.head_config());
  parallel_for(chunks, threads, [&](std::size_t c) {
    for (std::size_t i = 0; i < n; ++i) {
      if (chunk_of(i) != c) continue;
      auto& f = forwards[i];
      HeadSeeds seeds;
      seeds.event_cum_hazard = result.d_cum_hazard[i];
      seeds.event_rate = result.d_rate[i];
      const Vector dz = head.backward(f.trace, &f.event, seeds, &chunk_grads[c]);
      f.tape->backward(f.latent, dz.transpose());
      f.tape.reset();
    }
  });
  for (const auto& g : chunk_grads) accumulate(grads, g);
  return result;
}

namespace {

template <class T>
std::vector<T> gather(const std::vector<T>& all, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(all[i]);
  return out;
}

}  // namespace

Checkpoint train(std::span<const PatientRecord> cohort, const Checkpoint& initial, const TrainConfig& config,
                 const LossConfig& loss, const EpochCallback& on_epoch) {
  config.validate();
  loss.validate();
  if (!initial.model) throw UsageError("checkpoint has no model");
  if (initial.vocab.size() != initial.model->vocab_size()) throw DataError("vocabulary does not match the model");
  if (cohort.size() < 2) throw DataError("training needs at least two patients");
  for (const auto& p : cohort) validate(p);

  Checkpoint state(initial);
  TriskModel& model = *state.model;
  const auto seqs = tokenize_cohort(cohort, state.vocab, model.config().max_seq_len);
  const auto outs = outcomes(cohort);

  const std::size_t n = cohort.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(config.seed, kSplitStream));
  split_rng.shuffle(order);
  const auto n_eval = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(config.eval_split_fraction * static_cast<double>(n))), 1, n - 1);
  std::vector<std::size_t> eval_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_eval));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_eval), order.end());
  std::sort(eval_idx.begin(), eval_idx.end());
  std::sort(train_idx.begin(), train_idx.end());
  const auto eval_seqs = gather(seqs, eval_idx);
  const auto eval_outs = gather(outs, eval_idx);

  const auto batch = static_cast<std::size_t>(config.batch_size);
  const auto steps_per_epoch = static_cast<std::int64_t>((train_idx.size() + batch - 1) / batch);

  auto heldout_loss = [&] { return evaluate_loss(model, eval_seqs, eval_outs, loss, config.threads).total; };

  if (state.history.empty()) {
    const auto train_seqs = gather(seqs, train_idx);
    const auto train_outs = gather(outs, train_idx);
    EpochRecord rec;
    rec.epoch = state.epoch;
    rec.train_loss = evaluate_loss(model, train_seqs, train_outs, loss, config.threads).total;
    rec.heldout_loss = heldout_loss();
    rec.learning_rate = learning_rate_at(config, state.optimizer.step, steps_per_epoch);
    state.history.push_back(rec);
    state.best_validation_loss = rec.heldout_loss;
    if (on_epoch) on_epoch(rec);
  }

  Checkpoint best(state);
  int stale_epochs = 0;
  Gradients grads = model.params().zeros_like();
  for (int epoch = state.epoch + 1; epoch <= config.max_epochs; ++epoch) {
    std::vector<std::size_t> perm = train_idx;
    Rng shuffle_rng(derive_seed(config.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(perm);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    double lr = 0.0;
    for (std::size_t start = 0; start < perm.size(); start += batch) {
      const std::span<const std::size_t> idx(perm.data() + start, std::min(batch, perm.size() - start));
      const auto batch_seqs = gather(seqs, idx);
      const auto batch_outs = gather(outs, idx);
      lr = learning_rate_at(config, state.optimizer.step, steps_per_epoch);
      zero(grads);
      BatchLoss bl;
      try {
        bl = batch_gradients(model, batch_seqs, batch_outs, loss, grads,
                             derive_seed(config.seed, kDropoutStream, static_cast<std::uint64_t>(state.optimizer.step)),
                             true, config.threads);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + " batch " +
                             std::to_string(batches));
      }
      adam_step(model.params(), grads, state.optimizer, config, lr);
      if (!model.params().all_finite())
        throw NumericalError("non-finite parameters at epoch " + std::to_string(epoch) + " batch " +
                             std::to_string(batches));
      loss_sum += bl.total;
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    rec.heldout_loss = heldout_loss();
    rec.learning_rate = lr;
    state.epoch = epoch;
    state.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.heldout_loss < state.best_validation_loss) {
      state.best_validation_loss = rec.heldout_loss;
      best = state;
      stale_epochs = 0;
    } else if (++stale_epochs >= config.patience) {
      break;
    }
  }
  best.history = state.history;
  best.best_validation_loss = state.best_validation_loss;
  return best;
}

Checkpoint fine_tune(const Checkpoint& pretrained, std::span<const PatientRecord> cohort, TrainConfig config,
                     const LossConfig& loss, const EpochCallback& on_epoch) {
  if (!pretrained.model) throw UsageError("checkpoint has no model");
  bool shared = false;
  for (const auto& p : cohort) {
    for (const auto& e : p.encounters) {
      const int id = pretrained.vocab.id(e.code);
      if (id >= Vocabulary::kReserved) {
        shared = true;
        break;
      }
    }
    if (shared) break;
  }
  if (!shared) throw DataError("disjoint vocabularies");
  Checkpoint start(pretrained);
  start.optimizer = {};
  start.epoch = 0;
  start.history.clear();
  start.best_validation_loss = 0.0;
  return train(cohort, start, config, loss, on_epoch);
}

}  // namespace trisk
