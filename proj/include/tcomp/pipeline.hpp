// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// The full compression recipe: fine-tune, merge, retrain with
// distillation, factor the embedding, retrain the factors, then evaluate
// and benchmark every stage.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tcomp/bench.hpp"
#include "tcomp/data.hpp"
#include "tcomp/model.hpp"
#include "tcomp/search.hpp"
#include "tcomp/surgery.hpp"
#include "tcomp/training.hpp"

namespace tcomp {

// ---- individual stages

Model finetune_base(const ModelConfig& config, const CorpusSet& data, const TrainConfig& train_config,
                    TrainResult* history = nullptr);

struct Stage1Result {
  Model student;
  TrainResult history;
  float temperature = 0.0f;  // learned distillation temperature
};

/// Trains a merged (or pruned) student against the frozen teacher.
Stage1Result retrain_stage1(const Model& student, const Model& teacher, const CorpusSet& data,
                            const TrainConfig& train_config, const LossWeights& weights);

/// Trains a factored model against the dense table it was factored from.
Model retrain_stage2(const Model& factored, const Tensor& frozen_table, const CorpusSet& data,
                     const TrainConfig& train_config, TrainResult* history = nullptr);

// ---- search objectives: dev WER after a short stage-1 retrain on a
// subset of the data (train_fraction of train, dev_fraction of dev).

struct SearchBudget {
  TrainConfig train;
  double train_fraction = 0.3;
  double dev_fraction = 0.6;
};

/// Objective over (alpha, beta); the student is trained with `weights`.
Objective merge_weight_objective(const Model& teacher, const CorpusSet& data, const SearchBudget& budget,
                                 const LossWeights& weights);
/// Objective over (lambda, gamma) for a fixed merge of the teacher.
Objective loss_weight_objective(const Model& teacher, const CorpusSet& data, const SearchBudget& budget,
                                float alpha, float beta);

// ---- orchestration

struct PipelineConfig {
  std::uint64_t seed = 0;
  CorpusSizes corpus;
  ModelConfig model = ModelConfig::toy();
  TrainConfig base_train;
  TrainConfig stage1_train;
  TrainConfig stage2_train;
  float alpha = 0.25f;
  float beta = 0.75f;
  LossWeights loss;
  int rank = 16;
  BenchOptions bench;
  bool run_bench = true;
  // Test examples used for the WER column; 0 means all.
  std::size_t eval_limit = 0;

  void validate() const;
};

struct StageRow {
  std::string name;
  std::int64_t params = 0;
  int decoder_layers = 0;
  double tokens_per_second = 0.0;
  double speedup = 0.0;
  double eval_wer = 0.0;
  double token_accuracy = 0.0;
  std::string checkpoint;
};

struct PipelineReport {
  std::vector<StageRow> rows;  // base, +merge, +decompose
  bool count_only = false;

  std::string table() const;
  std::string csv() const;
};

/// Writes data/, the checkpoint of every stage, loss histories, bench
/// reports and report.{csv,txt} under out_dir. A failing stage is reported
/// by name; artifacts written before it are kept.
PipelineReport run_pipeline(const PipelineConfig& config, const std::filesystem::path& out_dir);

/// Parameter counts of the three stages without building any model.
PipelineReport count_only_report(const ModelConfig& base, int rank);

}  // namespace tcomp
