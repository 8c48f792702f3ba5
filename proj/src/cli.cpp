#include "trisk/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>

#include "trisk/checkpoint.hpp"
#include "trisk/config.hpp"
#include "trisk/cph.hpp"
#include "trisk/error.hpp"
#include "trisk/explain.hpp"
#include "trisk/metrics.hpp"
#include "trisk/synth.hpp"
#include "trisk/trainer.hpp"

namespace trisk {

namespace {

constexpr std::uint64_t kInitStream = 0x696e6974ULL;

struct Paths {
  std::string out;
  std::string config;
  std::string cohort;
  std::string checkpoint;
  std::string vocab;
  std::string preds;
  std::string design;
  std::string spec;
  std::string model;
  bool allow_vocab_mismatch = false;
};

std::filesystem::path out_path(const Paths& p, const char* name) { return std::filesystem::path(p.out) / name; }

void log_settings(const Paths& paths, const std::string& command, const Settings& settings) {
  std::ofstream log(out_path(paths, "resolved_config.txt"));
  if (!log) throw DataError("cannot write to " + paths.out);
  log << "command = " << command << "\n";
  write_settings(log, settings);
}

std::vector<Prediction> predictions_from_model(const Checkpoint& ck, std::span<const PatientRecord> cohort,
                                               const Settings& settings) {
  const auto seqs = tokenize_cohort(cohort, ck.vocab, ck.model->config().max_seq_len);
  const auto curves = predict_curves(*ck.model, seqs, settings.metrics.threads);
  std::vector<Prediction> preds;
  preds.reserve(cohort.size());
  for (std::size_t i = 0; i < cohort.size(); ++i)
    preds.push_back({cohort[i].patient_id, risk_at(curves[i], settings.metrics.horizon_months),
                     cohort[i].event_time_months, cohort[i].event_indicator});
  return preds;
}

void report_metrics(const Paths& paths, std::span<const Prediction> preds, const Settings& settings,
                    std::ostream& out) {
  const auto report = evaluate(preds, settings.metrics);
  write_report(paths.out, report);
  std::ifstream summary(out_path(paths, "summary.txt"));
  out << summary.rdbuf();
}

void save_training_outputs(const Paths& paths, const Checkpoint& ck) {
  save_checkpoint(out_path(paths, "model.ckpt"), ck);
  ck.vocab.write(out_path(paths, "vocab.tsv"));
}

EpochCallback epoch_logger(const Paths& paths, std::ostream& out) {
  auto log = std::make_shared<std::ofstream>(out_path(paths, "train_log.tsv"));
  *log << "epoch\ttrain_loss\theldout_loss\tlearning_rate\n";
  return [log, &out](const EpochRecord& r) {
    *log << r.epoch << '\t' << format_double(r.train_loss) << '\t' << format_double(r.heldout_loss) << '\t'
         << format_double(r.learning_rate) << std::endl;
    out << "epoch " << r.epoch << "  train " << r.train_loss << "  held-out " << r.heldout_loss << std::endl;
  };
}

int dispatch(const std::string& command, const Paths& paths, Settings& settings, std::ostream& out) {
  if (command == "synth") {
    validate(settings.synth);
    const auto cohort = generate(settings.synth);
    write_cohort(out_path(paths, "cohort.tsv"), cohort.patients);
    write_oracle(out_path(paths, "oracle.tsv"), cohort.oracle);
    write_design(out_path(paths, "design.csv"), cohort.patients, settings.synth.risk_codes);
    const auto events = std::count_if(cohort.patients.begin(), cohort.patients.end(),
                                      [](const PatientRecord& p) { return p.event_indicator == 1; });
    out << "patients " << cohort.patients.size() << "  events " << events << "\n";
  } else if (command == "train") {
    const auto cohort = read_cohort(paths.cohort);
    Checkpoint start;
    if (!paths.checkpoint.empty()) {
      CheckpointLoadOptions opts;
      if (!paths.vocab.empty()) opts.expected_vocab_hash = Vocabulary::read(std::filesystem::path(paths.vocab)).hash();
      opts.allow_vocab_mismatch = paths.allow_vocab_mismatch;
      start = load_checkpoint(paths.checkpoint, opts);
    } else {
      auto vocab = paths.vocab.empty() ? build_vocabulary(cohort, settings.min_prevalence)
                                       : Vocabulary::read(std::filesystem::path(paths.vocab));
      start = Checkpoint(std::move(vocab), settings.model, settings.head, derive_seed(settings.train.seed, kInitStream));
    }
    const auto result = train(cohort, start, settings.train, settings.loss, epoch_logger(paths, out));
    save_training_outputs(paths, result);
    out << "best held-out loss " << result.best_validation_loss << " at epoch " << result.epoch << "\n";
  } else if (command == "finetune") {
    const auto cohort = read_cohort(paths.cohort);
    const auto pretrained = load_checkpoint(paths.checkpoint);
    const auto result = fine_tune(pretrained, cohort, settings.train, settings.loss, epoch_logger(paths, out));
    save_training_outputs(paths, result);
    out << "best held-out loss " << result.best_validation_loss << " at epoch " << result.epoch << "\n";
  } else if (command == "eval") {
    std::vector<Prediction> preds;
    if (!paths.preds.empty()) {
      if (!paths.checkpoint.empty() || !paths.cohort.empty())
        throw UsageError("eval takes either --preds or --checkpoint with --cohort");
      preds = read_predictions(paths.preds);
    } else {
      if (paths.checkpoint.empty() || paths.cohort.empty())
        throw UsageError("eval needs --preds or both --checkpoint and --cohort");
      const auto ck = load_checkpoint(paths.checkpoint);
      const auto cohort = read_cohort(paths.cohort);
      preds = predictions_from_model(ck, cohort, settings);
      write_predictions(out_path(paths, "predictions.tsv"), preds);
    }
    report_metrics(paths, preds, settings, out);
  } else if (command == "explain") {
    const auto ck = load_checkpoint(paths.checkpoint);
    const auto cohort = read_cohort(paths.cohort);
    const auto attributions = attribute_cohort(cohort, ck.vocab, *ck.model, settings.explain);
    const auto report = aggregate(attributions, settings.explain);
    write_attribution_report(paths.out, report);
    out << "rank\tcode\tmean_contribution\tcount\n";
    for (std::size_t k = 0; k < report.top.size(); ++k)
      out << k + 1 << '\t' << report.top[k].code << '\t' << report.top[k].mean << '\t' << report.top[k].count << "\n";
  } else if (command == "baseline-fit") {
    const auto table = read_design(paths.design);
    CovariateSpec spec = paths.spec.empty() ? infer_spec(table) : read_spec(paths.spec);
    const auto design = expand(spec, table);
    const auto model = cph_fit(design.x, table.times, table.events, design.names);
    save_cph(out_path(paths, "cph_model.json"), model, spec);
    for (std::size_t j = 0; j < model.names.size(); ++j)
      out << model.names[j] << '\t' << model.beta(static_cast<Eigen::Index>(j)) << "\n";
  } else if (command == "baseline-eval") {
    CovariateSpec spec;
    const auto model = load_cph(paths.model, &spec);
    const auto table = read_design(paths.design);
    const auto design = expand(spec, table);
    if (design.names != model.names) throw DataError("design columns do not match the fitted model");
    std::vector<Prediction> preds;
    for (std::size_t i = 0; i < table.rows(); ++i)
      preds.push_back({table.ids[i],
                       cph_predict(model, design.x.row(static_cast<Eigen::Index>(i)).transpose(),
                                   settings.metrics.horizon_months),
                       table.times[i], table.events[i]});
    write_predictions(out_path(paths, "predictions.tsv"), preds);
    report_metrics(paths, preds, settings, out);
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transformer survival model for heart-failure mortality risk", "trisk"};
  app.require_subcommand(1);
  Paths paths;
  std::map<std::string, std::string> overrides;
  const Settings defaults;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out", paths.out, "output directory")->required();
    sub->add_option("--config", paths.config, "settings file of key = value lines");
    for (const auto& key : setting_keys()) {
      const std::string name = key.key;
      sub->add_option_function<std::string>(
          "--" + name, [&overrides, name](const std::string& v) { overrides[name] = v; },
          key.help + " [default: " + key.get(defaults) + "]");
    }
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort with known hazards");
  add_common(synth);
  auto* train_cmd = app.add_subcommand("train", "train a model on a cohort");
  add_common(train_cmd);
  train_cmd->add_option("--cohort", paths.cohort, "cohort file")->required();
  train_cmd->add_option("--checkpoint", paths.checkpoint, "resume from this checkpoint");
  train_cmd->add_option("--vocab", paths.vocab, "fixed vocabulary file (checked against --checkpoint)");
  train_cmd->add_flag("--allow-vocab-mismatch", paths.allow_vocab_mismatch,
                      "resume even when --vocab differs from the checkpoint vocabulary");
  auto* finetune = app.add_subcommand("finetune", "continue training a checkpoint on a new cohort");
  add_common(finetune);
  finetune->add_option("--checkpoint", paths.checkpoint, "pretrained checkpoint")->required();
  finetune->add_option("--cohort", paths.cohort, "fine-tuning cohort")->required();
  auto* eval = app.add_subcommand("eval", "evaluate predictions or a checkpoint on a cohort");
  add_common(eval);
  eval->add_option("--preds", paths.preds, "predictions file (patient_id, risk, event_time, event_indicator)");
  eval->add_option("--checkpoint", paths.checkpoint, "model checkpoint");
  eval->add_option("--cohort", paths.cohort, "cohort file");
  auto* explain = app.add_subcommand("explain", "integrated-gradient attributions of encounter codes");
  add_common(explain);
  explain->add_option("--checkpoint", paths.checkpoint, "model checkpoint")->required();
  explain->add_option("--cohort", paths.cohort, "cohort file")->required();
  auto* bfit = app.add_subcommand("baseline-fit", "fit the Cox proportional hazards baseline");
  add_common(bfit);
  bfit->add_option("--design", paths.design, "design CSV")->required();
  bfit->add_option("--spec", paths.spec, "covariate specification");
  auto* beval = app.add_subcommand("baseline-eval", "predict and evaluate with a fitted Cox baseline");
  add_common(beval);
  beval->add_option("--model", paths.model, "fitted Cox model")->required();
  beval->add_option("--design", paths.design, "design CSV")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    Settings settings;
    if (command == "finetune") settings.train.eval_split_fraction = fine_tune_defaults().eval_split_fraction;
    if (!paths.config.empty()) trisk::apply(settings, read_key_values(paths.config));
    trisk::apply(settings, overrides);
    std::filesystem::create_directories(paths.out);
    log_settings(paths, command, settings);
    return dispatch(command, paths, settings, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace trisk
