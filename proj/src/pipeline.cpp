// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tcomp/pipeline.hpp"

#include <fmt/core.h>

#include <fstream>
#include <memory>

#include "tcomp/checkpoint.hpp"
#include "tcomp/log.hpp"
#include "tcomp/lowrank.hpp"

namespace tcomp {

Model finetune_base(const ModelConfig& config, const CorpusSet& data, const TrainConfig& train_config,
                    TrainResult* history) {
  Model model = Model::init(config, train_config.seed);
  auto result = train(
      model, [](const Model& m, const Batch& b) { return cross_entropy(forward(m, b.src, b.tgt_in), b.tgt_out); },
      data.train, data.dev, train_config);
  if (history) *history = std::move(result);
  return model;
}

Stage1Result retrain_stage1(const Model& student, const Model& teacher, const CorpusSet& data,
                            const TrainConfig& train_config, const LossWeights& weights) {
  weights.validate();
  Stage1Result out{student.clone(), {}, 0.0f};
  Tensor rho = Tensor::scalar(weights.rho, true);
  out.history = train(
      out.student,
      [&](const Model& m, const Batch& b) { return stage1_loss(m, teacher, b, weights, rho).total; },
      data.train, data.dev, train_config, {rho});
  out.temperature = temperature_from_rho(rho.item());
  return out;
}

Model retrain_stage2(const Model& factored, const Tensor& frozen_table, const CorpusSet& data,
                     const TrainConfig& train_config, TrainResult* history) {
  Model model = factored.clone();
  const Tensor table = frozen_table.detach();
  auto result = train(
      model, [&](const Model& m, const Batch& b) { return stage2_loss(m, table, b).total; }, data.train, data.dev,
      train_config);
  if (history) *history = std::move(result);
  return model;
}

namespace {

CorpusSet search_subset(const CorpusSet& data, const SearchBudget& budget) {
  return {data.train.head_fraction(budget.train_fraction), data.dev.head_fraction(budget.dev_fraction), {}};
}

double short_retrain_wer(const Model& student, const Model& teacher, const CorpusSet& subset,
                         const SearchBudget& budget, const LossWeights& weights) {
  TrainConfig config = budget.train;
  config.eval_wer_limit = 0;
  const auto result = retrain_stage1(student, teacher, subset, config, weights);
  return evaluate(result.student, subset.dev).wer;
}

}  // namespace

Objective merge_weight_objective(const Model& teacher, const CorpusSet& data, const SearchBudget& budget,
                                 const LossWeights& weights) {
  auto subset = std::make_shared<CorpusSet>(search_subset(data, budget));
  return [&teacher, subset, budget, weights](const std::vector<double>& x) {
    const auto spec = MergeSpec::adjacent(teacher.config.decoder_layers, static_cast<float>(x.at(0)),
                                          static_cast<float>(x.at(1)));
    return short_retrain_wer(merge_decoder(teacher, spec), teacher, *subset, budget, weights);
  };
}

Objective loss_weight_objective(const Model& teacher, const CorpusSet& data, const SearchBudget& budget,
                                float alpha, float beta) {
  auto subset = std::make_shared<CorpusSet>(search_subset(data, budget));
  auto merged = std::make_shared<Model>(
      merge_decoder(teacher, MergeSpec::adjacent(teacher.config.decoder_layers, alpha, beta)));
  return [&teacher, subset, merged, budget](const std::vector<double>& x) {
    LossWeights weights;
    weights.lambda = static_cast<float>(x.at(0));
    weights.gamma = static_cast<float>(x.at(1));
    return short_retrain_wer(*merged, teacher, *subset, budget, weights);
  };
}

void PipelineConfig::validate() const {
  model.validate();
  if (model.rank) throw SpecError("pipeline: the base model must have a dense embedding");
  base_train.validate();
  stage1_train.validate();
  stage2_train.validate();
  MergeSpec::adjacent(model.decoder_layers, alpha, beta).validate(model.decoder_layers);
  loss.validate();
  ModelConfig factored = model;
  factored.rank = rank;
  factored.validate();
  if (run_bench) bench.validate();
}

namespace {

// Runs one stage, prefixing any error with the stage name while keeping
// its category.
template <typename F>
auto stage(const char* name, F&& body) {
  const auto tag = [name](const std::exception& e) { return fmt::format("stage '{}' failed: {}", name, e.what()); };
  try {
    return body();
  } catch (const SpecError& e) {
    throw SpecError(tag(e));
  } catch (const InputError& e) {
    throw InputError(tag(e));
  } catch (const FormatError& e) {
    throw FormatError(tag(e));
  } catch (const DimensionError& e) {
    throw DimensionError(tag(e));
  } catch (const StructuralError& e) {
    throw StructuralError(tag(e));
  } catch (const std::exception& e) {
    throw NumericalError(tag(e));
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << text;
}

}  // namespace

PipelineReport run_pipeline(const PipelineConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  std::filesystem::create_directories(out_dir);
  auto info = [](const std::string& s) { log_info(s); };

  const CorpusSet data = stage("gen-data", [&] {
    auto set = generate_corpus(config.seed, config.corpus);
    write_corpus_set(set, out_dir / "data");
    return set;
  });

  TrainResult base_history;
  const Model base = stage("train", [&] {
    info("fine-tuning the base model");
    Model m = finetune_base(config.model, data, config.base_train, &base_history);
    save_checkpoint(m, out_dir / "base.ckpt");
    write_history_csv(base_history, out_dir / "base_history.csv");
    return m;
  });

  const Model merged = stage("merge", [&] {
    Model m = merge_decoder(base, MergeSpec::adjacent(config.model.decoder_layers, config.alpha, config.beta));
    save_checkpoint(m, out_dir / "merged.ckpt");
    return m;
  });

  const Stage1Result stage1 = stage("merge-retrain", [&] {
    info("retraining the merged model with distillation");
    auto r = retrain_stage1(merged, base, data, config.stage1_train, config.loss);
    save_checkpoint(r.student, out_dir / "stage1.ckpt");
    write_history_csv(r.history, out_dir / "stage1_history.csv");
    return r;
  });

  const Model decomposed = stage("decompose", [&] {
    Model m = decompose_model(stage1.student, config.rank);
    save_checkpoint(m, out_dir / "decomposed.ckpt");
    return m;
  });

  const Model stage2 = stage("distill-embed", [&] {
    info("retraining the factored embedding");
    TrainResult history;
    Model m = retrain_stage2(decomposed, stage1.student.embedding.table, data, config.stage2_train, &history);
    save_checkpoint(m, out_dir / "stage2.ckpt");
    write_history_csv(history, out_dir / "stage2_history.csv");
    return m;
  });

  PipelineReport report;
  const std::pair<const char*, const Model*> stages[] = {
      {"base", &base}, {"+merge", &stage1.student}, {"+decompose", &stage2}};
  const char* stems[] = {"base", "stage1", "stage2"};
  stage("eval", [&] {
    for (std::size_t i = 0; i < 3; ++i) {
      const auto& [name, model] = stages[i];
      StageRow row;
      row.name = name;
      row.params = model->parameter_count();
      row.decoder_layers = model->config.decoder_layers;
      row.checkpoint = (out_dir / (std::string(stems[i]) + ".ckpt")).string();
      const auto ev = evaluate(*model, data.test, config.eval_limit);
      row.eval_wer = ev.wer;
      row.token_accuracy = ev.token_accuracy;
      report.rows.push_back(row);
    }
    return 0;
  });

  if (config.run_bench) {
    stage("bench", [&] {
      const auto reports = bench_interleaved({stages[0].second, stages[1].second, stages[2].second},
                                              {stages[0].first, stages[1].first, stages[2].first}, config.bench);
      for (std::size_t i = 0; i < 3; ++i) {
        report.rows[i].tokens_per_second = reports[i].tokens_per_second;
        report.rows[i].speedup = reports[i].tokens_per_second / reports[0].tokens_per_second;
        write_text(out_dir / fmt::format("bench_{}.json", stems[i]), bench_report_json(reports[i]));
      }
      return 0;
    });
  }

  write_text(out_dir / "report.csv", report.csv());
  write_text(out_dir / "report.txt", report.table());
  return report;
}

PipelineReport count_only_report(const ModelConfig& base, int rank) {
  base.validate();
  if (base.rank) throw SpecError("count-only report: base config must have a dense embedding");
  ModelConfig merged = base;
  merged.decoder_layers = base.decoder_layers / 2;
  MergeSpec::adjacent(base.decoder_layers).validate(base.decoder_layers);
  ModelConfig factored = merged;
  factored.rank = rank;
  PipelineReport report;
  report.count_only = true;
  const std::pair<const char*, const ModelConfig*> rows[] = {
      {"base", &base}, {"+merge", &merged}, {"+decompose", &factored}};
  for (const auto& [name, c] : rows) {
    StageRow row;
    row.name = name;
    row.params = param_count(*c);
    row.decoder_layers = c->decoder_layers;
    report.rows.push_back(row);
  }
  return report;
}

std::string PipelineReport::table() const {
  std::string out;
  if (count_only) {
    out += fmt::format("{:<12} {:>12} {:>10} {:>10}\n", "model", "params", "params(M)", "dec_layers");
    for (const auto& r : rows) {
      out += fmt::format("{:<12} {:>12} {:>10.1f} {:>10}\n", r.name, r.params, r.params / 1e6, r.decoder_layers);
    }
    return out;
  }
  out += fmt::format("{:<12} {:>10} {:>10} {:>12} {:>8} {:>8} {:>9}\n", "model", "params", "dec_layers", "tokens/s",
                     "speedup", "wer", "accuracy");
  for (const auto& r : rows) {
    out += fmt::format("{:<12} {:>10} {:>10} {:>12.1f} {:>8.2f} {:>8.4f} {:>9.4f}\n", r.name, r.params,
                       r.decoder_layers, r.tokens_per_second, r.speedup, r.eval_wer, r.token_accuracy);
  }
  return out;
}

std::string PipelineReport::csv() const {
  std::string out = "model,params,decoder_layers,tokens_per_second,speedup,eval_wer,token_accuracy,checkpoint\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{:.3f},{:.4f},{:.6f},{:.6f},{}\n", r.name, r.params, r.decoder_layers,
                       r.tokens_per_second, r.speedup, r.eval_wer, r.token_accuracy, r.checkpoint);
  }
  return out;
}

}  // namespace tcomp
