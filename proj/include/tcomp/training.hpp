// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tcomp/data.hpp"
#include "tcomp/model.hpp"

namespace tcomp {

/// Mean negative log-likelihood over non-PAD targets.
/// logits: [B, T, V], targets: [B, T].
Tensor cross_entropy(const Tensor& logits, const TokenBatch& targets, int pad_id = kPad);

/// Learnable distillation temperature, tau = softplus(rho).
float temperature_from_rho(float rho);
float rho_for_temperature(float tau);

/// tau^2 * mean over positions of KL(softmax(teacher/tau) || softmax(student/tau)).
/// Teacher logits are treated as constants. `valid` (one flag per position)
/// restricts the mean; empty means every position counts.
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, const Tensor& rho,
               std::span<const char> valid = {});

struct LossWeights {
  float lambda = 1.0f;  // CE weight
  float gamma = 1.0f;   // KD weight
  float rho = rho_for_temperature(2.0f);

  void validate() const;
};

struct Stage1Terms {
  Tensor total;
  Tensor ce;
  Tensor kd;
};

/// lambda * CE(student) + gamma * KD(student || frozen teacher). The teacher
/// forward runs without recording gradient.
Stage1Terms stage1_loss(const Model& student, const Model& teacher, const Batch& batch, const LossWeights& weights,
                        const Tensor& rho);

std::vector<char> valid_positions(const TokenBatch& targets, int pad_id = kPad);

struct TrainConfig {
  int epochs = 20;
  float learning_rate = 3e-4f;
  int batch_size = 32;
  std::uint64_t seed = 0;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
  std::optional<float> clip_norm = 1.0f;
  // 0 means a full pass over the training set.
  int max_steps_per_epoch = 0;
  // Dev examples decoded each epoch for eval WER; 0 skips decoding.
  int eval_wer_limit = 100;
  bool verbose = false;

  void validate() const;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, const TrainConfig& config);
  // Applies one update from the accumulated grads, then clears them.
  void step();
  void zero_grad();
  // Global L2 norm of the current gradients.
  double grad_norm() const;
  std::int64_t steps() const { return steps_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  float lr_, beta1_, beta2_, eps_;
  std::optional<float> clip_;
  std::int64_t steps_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double eval_wer = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_eval_loss = 0.0;
};

using LossFn = std::function<Tensor(const Model&, const Batch&)>;

/// Length-bucketed, shuffled minibatches; deterministic per seed.
std::vector<std::vector<std::size_t>> make_batches(const Corpus& corpus, int batch_size, std::uint64_t seed);

/// Adam loop. Eval loss is dev CE; the parameters of the best-eval epoch
/// are restored before returning. `extra` holds additional trainable
/// tensors (the distillation temperature).
TrainResult train(Model& model, const LossFn& loss, const Corpus& train_set, const Corpus& dev_set,
                  const TrainConfig& config, std::vector<Tensor> extra = {});

/// epoch,train_loss,eval_loss,eval_wer
std::string history_csv(const TrainResult& result);
void write_history_csv(const TrainResult& result, const std::filesystem::path& path);

struct EvalResult {
  double ce = 0.0;              // mean token NLL
  double wer = 0.0;             // corpus level: total edits / total reference tokens
  double token_accuracy = 0.0;  // mean per-sequence max(0, 1 - wer)
  std::size_t sequences = 0;
};

/// limit == 0 evaluates the whole corpus.
EvalResult evaluate(const Model& model, const Corpus& corpus, std::size_t limit = 0, bool decode = true);
double eval_cross_entropy(const Model& model, const Corpus& corpus, std::size_t limit = 0);

/// Greedy transcripts with EOS and anything after it removed.
std::vector<std::vector<int>> transcribe(const Model& model, std::span<const Example> examples);

}  // namespace tcomp
