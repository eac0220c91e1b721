// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// tcomp: command-line driver for the compression pipeline.

#include <CLI11.hpp>
#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tcomp/bench.hpp"
#include "tcomp/checkpoint.hpp"
#include "tcomp/data.hpp"
#include "tcomp/log.hpp"
#include "tcomp/lowrank.hpp"
#include "tcomp/pipeline.hpp"
#include "tcomp/search.hpp"
#include "tcomp/surgery.hpp"
#include "tcomp/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tcomp;

namespace {

// ---------------------------------------------------------------- settings

// Everything a subcommand may need. Filled from defaults, then the config
// file, then command-line flags.
struct Settings {
  std::uint64_t seed = 0;
  fs::path out = "out";
  CorpusSizes corpus;
  ModelConfig model = ModelConfig::toy();
  TrainConfig train;
  TrainConfig stage1;
  TrainConfig stage2;
  float alpha = 0.25f;
  float beta = 0.75f;
  LossWeights loss;
  int rank = 16;
  BenchOptions bench;
  SearchSpace space = SearchSpace::merge_weights();
  std::string space_kind = "merge";
  double search_train_fraction = 0.3;
  double search_dev_fraction = 0.6;
  int search_epochs = 1;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

template <typename T>
void take(const json& j, const char* key, T& dst) {
  if (j.contains(key) && !j.at(key).is_null()) dst = j.at(key).get<T>();
}

void apply_train(const json& j, TrainConfig& t) {
  if (!j.is_object()) throw SpecError("config: training section must be an object");
  take(j, "epochs", t.epochs);
  take(j, "learning_rate", t.learning_rate);
  take(j, "batch_size", t.batch_size);
  take(j, "max_steps_per_epoch", t.max_steps_per_epoch);
  take(j, "eval_wer_limit", t.eval_wer_limit);
  take(j, "adam_beta1", t.adam_beta1);
  take(j, "adam_beta2", t.adam_beta2);
  take(j, "adam_eps", t.adam_eps);
  if (j.contains("clip_norm")) {
    if (j["clip_norm"].is_null()) {
      t.clip_norm.reset();
    } else {
      t.clip_norm = j["clip_norm"].get<float>();
    }
  }
}

void set_space(Settings& s, const std::string& kind) {
  if (kind == "merge") {
    s.space = SearchSpace::merge_weights();
  } else if (kind == "loss") {
    s.space = SearchSpace::loss_weights();
  } else if (kind == "quadratic") {
    s.space = SearchSpace::merge_weights();
    s.space.objective = "quadratic";
  } else {
    throw SpecError("search space must be merge, loss or quadratic, got '" + kind + "'");
  }
  s.space_kind = kind;
}

void apply_config_file(Settings& s, const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw SpecError("config " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw SpecError("config " + path.string() + ": top level must be an object");
  try {
    take(j, "seed", s.seed);
    if (j.contains("out")) s.out = j["out"].get<std::string>();
    if (j.contains("model")) {
      if (j["model"].is_string()) {
        const auto name = j["model"].get<std::string>();
        if (name == "toy") {
          s.model = ModelConfig::toy();
        } else if (name == "whisper-base") {
          s.model = ModelConfig::whisper_base_like();
        } else {
          throw SpecError("config: unknown model preset '" + name + "'");
        }
      } else {
        s.model = config_from_json(j["model"].dump());
      }
    }
    if (j.contains("corpus")) {
      take(j["corpus"], "train", s.corpus.train);
      take(j["corpus"], "dev", s.corpus.dev);
      take(j["corpus"], "test", s.corpus.test);
    }
    if (j.contains("train")) apply_train(j["train"], s.train);
    if (j.contains("stage1_train")) apply_train(j["stage1_train"], s.stage1);
    if (j.contains("stage2_train")) apply_train(j["stage2_train"], s.stage2);
    if (j.contains("merge")) {
      take(j["merge"], "alpha", s.alpha);
      take(j["merge"], "beta", s.beta);
    }
    if (j.contains("loss")) {
      take(j["loss"], "lambda", s.loss.lambda);
      take(j["loss"], "gamma", s.loss.gamma);
      if (j["loss"].contains("temperature")) s.loss.rho = rho_for_temperature(j["loss"]["temperature"].get<float>());
    }
    take(j, "rank", s.rank);
    if (j.contains("bench")) {
      take(j["bench"], "batch_size", s.bench.batch_size);
      take(j["bench"], "tokens", s.bench.tokens);
      take(j["bench"], "repeats", s.bench.repeats);
      take(j["bench"], "warmup", s.bench.warmup);
    }
    if (j.contains("search")) {
      const auto& q = j["search"];
      if (q.contains("space")) set_space(s, q["space"].get<std::string>());
      if (q.contains("params")) {
        const auto feasible = s.space.feasible;
        s.space.params.clear();
        for (const auto& p : q["params"]) {
          s.space.params.push_back({p.at("name").get<std::string>(), p.at("low").get<double>(),
                                    p.at("high").get<double>()});
        }
        s.space.feasible = feasible;
      }
      take(q, "budget", s.space.budget);
      take(q, "train_fraction", s.search_train_fraction);
      take(q, "dev_fraction", s.search_dev_fraction);
      take(q, "epochs", s.search_epochs);
    }
  } catch (const json::exception& e) {
    throw SpecError("config " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- helpers

void say(const std::string& text) {
  if (!quiet()) fmt::print("{}", text);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << text;
}

// Corpus from --data when given (or out/data when present), otherwise
// generated from the seed.
CorpusSet load_data(const Settings& s, const std::optional<fs::path>& data) {
  if (data) return read_corpus_set(*data);
  if (fs::exists(s.out / "data" / "train.txt")) return read_corpus_set(s.out / "data");
  return generate_corpus(s.seed, s.corpus);
}

const Corpus& split_of(const CorpusSet& set, const std::string& split) {
  if (split == "train") return set.train;
  if (split == "dev") return set.dev;
  if (split == "test") return set.test;
  throw SpecError("split must be train, dev or test, got '" + split + "'");
}

std::string eval_json(const EvalResult& r) {
  json j = {{"cross_entropy", r.ce}, {"wer", r.wer}, {"token_accuracy", r.token_accuracy}, {"sequences", r.sequences}};
  return j.dump(2) + "\n";
}

// Applies {"alpha":..,"beta":..} or {"lambda":..,"gamma":..} fragments.
void apply_params_json(Settings& s, const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw SpecError("params " + path.string() + ": " + e.what());
  }
  take(j, "alpha", s.alpha);
  take(j, "beta", s.beta);
  take(j, "lambda", s.loss.lambda);
  take(j, "gamma", s.loss.gamma);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer merging and low-rank embedding compression for encoder-decoder transformers", "tcomp"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::optional<std::uint64_t> seed;
  std::optional<std::string> config_path, out_dir;
  bool quiet_flag = false;
  app.add_option("--seed", seed, "Random seed");
  app.add_option("--config", config_path, "JSON config file; flags override its values");
  app.add_option("--out", out_dir, "Output directory (default: out)");
  app.add_flag("--quiet", quiet_flag, "Only print results and warnings");

  // Flags shared by several subcommands.
  std::optional<std::string> data_dir, checkpoint, teacher, student, reference, params_file, split_name_opt, space_opt;
  std::vector<std::string> checkpoints;
  std::optional<int> epochs, batch_size, rank, train_size, dev_size, test_size, budget, tokens, repeats, warmup,
      max_steps, eval_limit;
  std::optional<float> lr, alpha, beta, lambda, gamma, temperature;
  bool count_only = false, whisper = false, no_bench = false;
  std::optional<std::size_t> limit;

  auto add_train_flags = [&](CLI::App* c) {
    c->add_option("--data", data_dir, "Corpus directory (train.txt, dev.txt, test.txt)");
    c->add_option("--epochs", epochs, "Training epochs");
    c->add_option("--lr", lr, "Learning rate");
    c->add_option("--batch-size", batch_size, "Minibatch size");
    c->add_option("--max-steps", max_steps, "Cap on steps per epoch (0 = full pass)");
    c->add_option("--eval-wer-limit", eval_limit, "Dev examples decoded per epoch (0 = none)");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  gen->add_option("--train-size", train_size);
  gen->add_option("--dev-size", dev_size);
  gen->add_option("--test-size", test_size);

  auto* train_cmd = app.add_subcommand("train", "Fine-tune the base model");
  add_train_flags(train_cmd);

  auto* merge_cmd = app.add_subcommand("merge", "Merge adjacent decoder layers");
  merge_cmd->add_option("--checkpoint", checkpoint, "Base checkpoint")->required();
  merge_cmd->add_option("--alpha", alpha);
  merge_cmd->add_option("--beta", beta);
  merge_cmd->add_option("--params", params_file, "JSON with alpha/beta (search output)");

  auto* retrain_cmd = app.add_subcommand("merge-retrain", "Retrain a merged model against the teacher");
  add_train_flags(retrain_cmd);
  retrain_cmd->add_option("--teacher", teacher, "Teacher (base) checkpoint")->required();
  retrain_cmd->add_option("--student", student, "Merged checkpoint; merged from the teacher when absent");
  retrain_cmd->add_option("--alpha", alpha);
  retrain_cmd->add_option("--beta", beta);
  retrain_cmd->add_option("--lambda", lambda, "CE weight");
  retrain_cmd->add_option("--gamma", gamma, "KD weight");
  retrain_cmd->add_option("--temperature", temperature, "Initial distillation temperature");
  retrain_cmd->add_option("--params", params_file, "JSON with alpha/beta or lambda/gamma (search output)");

  auto* decompose_cmd = app.add_subcommand("decompose", "Factor the embedding by truncated SVD");
  decompose_cmd->add_option("--checkpoint", checkpoint, "Stage-1 checkpoint")->required();
  decompose_cmd->add_option("--rank", rank);

  auto* distill_cmd = app.add_subcommand("distill-embed", "Retrain a factored model with feature distillation");
  add_train_flags(distill_cmd);
  distill_cmd->add_option("--checkpoint", checkpoint, "Factored checkpoint")->required();
  distill_cmd->add_option("--reference", reference, "Dense checkpoint whose embedding is the frozen target")
      ->required();

  auto* sim_cmd = app.add_subcommand("similarity", "Decoder layer activation similarity");
  sim_cmd->add_option("--checkpoint", checkpoint)->required();
  sim_cmd->add_option("--data", data_dir);
  sim_cmd->add_option("--split", split_name_opt, "Corpus split (default dev)");

  auto* search_cmd = app.add_subcommand("search", "Bayesian search over merge or loss weights");
  search_cmd->add_option("--space", space_opt, "merge, loss or quadratic");
  search_cmd->add_option("--teacher", teacher, "Base checkpoint (not needed for quadratic)");
  search_cmd->add_option("--data", data_dir);
  search_cmd->add_option("--budget", budget);
  search_cmd->add_option("--epochs", epochs, "Retraining epochs per trial");
  search_cmd->add_option("--max-steps", max_steps);
  search_cmd->add_option("--alpha", alpha);
  search_cmd->add_option("--beta", beta);

  auto* eval_cmd = app.add_subcommand("eval", "Cross-entropy, WER and token accuracy");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--data", data_dir);
  eval_cmd->add_option("--split", split_name_opt, "Corpus split (default test)");
  eval_cmd->add_option("--limit", limit, "Evaluate only the first N examples");

  auto* bench_cmd = app.add_subcommand("bench", "Fixed-length greedy decode throughput");
  bench_cmd->add_option("--checkpoint", checkpoints, "Checkpoints; speedups are relative to the first")
      ->required();
  bench_cmd->add_option("--batch-size", batch_size);
  bench_cmd->add_option("--tokens", tokens);
  bench_cmd->add_option("--repeats", repeats);
  bench_cmd->add_option("--warmup", warmup);

  auto* pipe_cmd = app.add_subcommand("pipeline", "Run every stage and print the summary table");
  pipe_cmd->add_option("--epochs", epochs, "Epochs for every training stage");
  pipe_cmd->add_option("--lr", lr);
  pipe_cmd->add_option("--max-steps", max_steps);
  pipe_cmd->add_option("--rank", rank);
  pipe_cmd->add_option("--alpha", alpha);
  pipe_cmd->add_option("--beta", beta);
  pipe_cmd->add_flag("--count-only", count_only, "Parameter counts only, no training");
  pipe_cmd->add_flag("--whisper-base", whisper, "Use the Whisper-base dimensions");
  pipe_cmd->add_flag("--no-bench", no_bench, "Skip the throughput benchmark");

  auto* count_cmd = app.add_subcommand("param-count", "Parameter counts of checkpoints or a config");
  count_cmd->add_option("--checkpoint", checkpoints);
  count_cmd->add_flag("--whisper-base", whisper, "Count the Whisper-base dimensions");
  count_cmd->add_option("--rank", rank, "With a config: count the three pipeline stages at this rank");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    Settings s;
    if (config_path) apply_config_file(s, *config_path);
    if (seed) s.seed = *seed;
    if (out_dir) s.out = *out_dir;
    set_quiet(quiet_flag);
    for (auto* t : {&s.train, &s.stage1, &s.stage2}) {
      t->seed = s.seed;
      t->verbose = !quiet_flag;
      if (epochs) t->epochs = *epochs;
      if (lr) t->learning_rate = *lr;
      if (batch_size) t->batch_size = *batch_size;
      if (max_steps) t->max_steps_per_epoch = *max_steps;
      if (eval_limit) t->eval_wer_limit = *eval_limit;
    }
    if (params_file) apply_params_json(s, *params_file);
    if (alpha) s.alpha = *alpha;
    if (beta) s.beta = *beta;
    if (lambda) s.loss.lambda = *lambda;
    if (gamma) s.loss.gamma = *gamma;
    if (temperature) s.loss.rho = rho_for_temperature(*temperature);
    if (rank) s.rank = *rank;
    if (train_size) s.corpus.train = *train_size;
    if (dev_size) s.corpus.dev = *dev_size;
    if (test_size) s.corpus.test = *test_size;
    if (batch_size) s.bench.batch_size = *batch_size;
    if (tokens) s.bench.tokens = *tokens;
    if (repeats) s.bench.repeats = *repeats;
    if (warmup) s.bench.warmup = *warmup;
    if (space_opt) set_space(s, *space_opt);
    if (budget) s.space.budget = *budget;
    if (epochs) s.search_epochs = *epochs;
    s.bench.seed = s.seed;

    if (*gen) {
      const auto set = generate_corpus(s.seed, s.corpus);
      write_corpus_set(set, s.out / "data");
      say(fmt::format("wrote {} / {} / {} examples to {}\n", set.train.size(), set.dev.size(), set.test.size(),
                      (s.out / "data").string()));
    } else if (*train_cmd) {
      const auto data = load_data(s, data_dir);
      TrainResult history;
      Model model = finetune_base(s.model, data, s.train, &history);
      save_checkpoint(model, s.out / "base.ckpt");
      write_history_csv(history, s.out / "base_history.csv");
      say(fmt::format("best epoch {} dev CE {:.4f}; wrote {}\n", history.best_epoch, history.best_eval_loss,
                      (s.out / "base.ckpt").string()));
    } else if (*merge_cmd) {
      const Model base = load_checkpoint(*checkpoint);
      const Model merged =
          merge_decoder(base, MergeSpec::adjacent(base.config.decoder_layers, s.alpha, s.beta));
      save_checkpoint(merged, s.out / "merged.ckpt");
      say(fmt::format("{} -> {} decoder layers, {} -> {} params; wrote {}\n", base.config.decoder_layers,
                      merged.config.decoder_layers, base.parameter_count(), merged.parameter_count(),
                      (s.out / "merged.ckpt").string()));
    } else if (*retrain_cmd) {
      const auto data = load_data(s, data_dir);
      const Model base = load_checkpoint(*teacher);
      const Model merged = student ? load_checkpoint(*student)
                                   : merge_decoder(base, MergeSpec::adjacent(base.config.decoder_layers, s.alpha, s.beta));
      const auto result = retrain_stage1(merged, base, data, s.stage1, s.loss);
      save_checkpoint(result.student, s.out / "stage1.ckpt");
      write_history_csv(result.history, s.out / "stage1_history.csv");
      say(fmt::format("best epoch {} dev CE {:.4f}, temperature {:.4f}; wrote {}\n", result.history.best_epoch,
                      result.history.best_eval_loss, result.temperature, (s.out / "stage1.ckpt").string()));
    } else if (*decompose_cmd) {
      const Model dense = load_checkpoint(*checkpoint);
      const Model factored = decompose_model(dense, s.rank);
      save_checkpoint(factored, s.out / "decomposed.ckpt");
      say(fmt::format("rank {}: embedding {} -> {} params; wrote {}\n", s.rank, dense.embedding.table.numel(),
                      factored.embedding.factors->param_count(), (s.out / "decomposed.ckpt").string()));
    } else if (*distill_cmd) {
      const auto data = load_data(s, data_dir);
      const Model factored = load_checkpoint(*checkpoint);
      const Model dense = load_checkpoint(*reference);
      if (dense.embedding.factored()) throw SpecError("--reference must hold a dense embedding");
      TrainResult history;
      const Model trained = retrain_stage2(factored, dense.embedding.table, data, s.stage2, &history);
      save_checkpoint(trained, s.out / "stage2.ckpt");
      write_history_csv(history, s.out / "stage2_history.csv");
      say(fmt::format("best epoch {} dev CE {:.4f}; wrote {}\n", history.best_epoch, history.best_eval_loss,
                      (s.out / "stage2.ckpt").string()));
    } else if (*sim_cmd) {
      const auto data = load_data(s, data_dir);
      const std::string split = split_name_opt.value_or("dev");
      const Model model = load_checkpoint(*checkpoint);
      const auto matrix = similarity_matrix(capture_activations(model, split_of(data, split)), split);
      write_similarity_csv(matrix, s.out / "similarity.csv");
      fmt::print("{}", similarity_csv(matrix));
      say(matrix.summary() + "\n");
    } else if (*search_cmd) {
      Objective objective;
      std::optional<Model> base;
      std::optional<CorpusSet> data;
      if (s.space.objective == "quadratic") {
        objective = [](const std::vector<double>& x) {
          return (x[0] - 0.2) * (x[0] - 0.2) + (x[1] - 0.8) * (x[1] - 0.8);
        };
      } else {
        if (!teacher) throw SpecError("search: --teacher is required for the merge and loss spaces");
        base = load_checkpoint(*teacher);
        data = load_data(s, data_dir);
        SearchBudget sb;
        sb.train = s.stage1;
        sb.train.epochs = s.search_epochs;
        sb.train.verbose = false;
        sb.train_fraction = s.search_train_fraction;
        sb.dev_fraction = s.search_dev_fraction;
        objective = s.space_kind == "loss" ? loss_weight_objective(*base, *data, sb, s.alpha, s.beta)
                                           : merge_weight_objective(*base, *data, sb, s.loss);
      }
      const auto result = optimize(s.space, objective, s.seed);
      write_trials_csv(s.space, result.history, s.out / "trials.csv");
      if (!result.best) throw NumericalError("search: every trial failed");
      write_text(s.out / "best_params.json", best_params_json(s.space, *result.best) + "\n");
      fmt::print("{}\n", best_params_json(s.space, *result.best));
    } else if (*eval_cmd) {
      const auto data = load_data(s, data_dir);
      const Model model = load_checkpoint(*checkpoint);
      const auto r = evaluate(model, split_of(data, split_name_opt.value_or("test")), limit.value_or(0));
      fmt::print("{}", eval_json(r));
    } else if (*bench_cmd) {
      std::vector<Model> models;
      std::vector<const Model*> handles;
      std::vector<std::string> ids;
      for (const auto& path : checkpoints) {
        models.push_back(load_checkpoint(path));
        ids.push_back(fs::path(path).stem().string());
      }
      for (const auto& m : models) handles.push_back(&m);
      const auto reports = bench_interleaved(handles, ids, s.bench);
      const double base_tps = reports.front().tokens_per_second;
      json all = json::array();
      for (const auto& r : reports) {
        auto j = json::parse(bench_report_json(r));
        j["speedup"] = r.tokens_per_second / base_tps;
        all.push_back(j);
        say(fmt::format("{:<16} {:>4} layers {:>10} params {:>10.1f} tokens/s  speedup {:.2f}\n", r.model_id,
                        r.decoder_layers, r.params, r.tokens_per_second, r.tokens_per_second / base_tps));
      }
      write_text(s.out / "bench.json", all.dump(2) + "\n");
    } else if (*pipe_cmd) {
      if (whisper) s.model = ModelConfig::whisper_base_like();
      if (count_only) {
        const int r = rank ? *rank : (whisper ? 96 : s.rank);
        const auto report = count_only_report(s.model, r);
        fmt::print("{}", report.table());
        write_text(s.out / "report.csv", report.csv());
      } else {
        PipelineConfig pc;
        pc.seed = s.seed;
        pc.corpus = s.corpus;
        pc.model = s.model;
        pc.base_train = s.train;
        pc.stage1_train = s.stage1;
        pc.stage2_train = s.stage2;
        pc.alpha = s.alpha;
        pc.beta = s.beta;
        pc.loss = s.loss;
        pc.rank = s.rank;
        pc.bench = s.bench;
        pc.run_bench = !no_bench;
        const auto report = run_pipeline(pc, s.out);
        fmt::print("{}", report.table());
      }
    } else if (*count_cmd) {
      if (!checkpoints.empty()) {
        for (const auto& path : checkpoints) {
          const Model model = load_checkpoint(path);
          fmt::print("{}\t{}\n", path, model.parameter_count());
        }
      } else {
        if (whisper) s.model = ModelConfig::whisper_base_like();
        const int r = rank ? *rank : (whisper ? 96 : s.rank);
        fmt::print("{}", count_only_report(s.model, r).table());
      }
    }
  } catch (const SpecError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  }
  return 0;
}
