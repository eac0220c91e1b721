// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tcomp/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/core.h>

namespace tcomp {

std::vector<char> valid_positions(const TokenBatch& targets, int pad_id) {
  std::vector<char> valid(targets.ids.size());
  for (std::size_t i = 0; i < valid.size(); ++i) valid[i] = targets.ids[i] != pad_id;
  return valid;
}

Tensor cross_entropy(const Tensor& logits, const TokenBatch& targets, int pad_id) {
  if (logits.rank() != 3 || logits.dim(0) != targets.batch || logits.dim(1) != targets.length) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " do not match targets [" +
                         std::to_string(targets.batch) + "x" + std::to_string(targets.length) + "]");
  }
  std::vector<int> index(targets.ids.size());
  std::vector<float> mask(targets.ids.size());
  std::size_t count = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const bool keep = targets.ids[i] != pad_id;
    index[i] = keep ? targets.ids[i] : 0;
    mask[i] = keep ? 1.0f : 0.0f;
    count += keep;
  }
  if (count == 0) throw InputError("cross_entropy: every target position is padding");
  Tensor picked = take_along_last(log_softmax(logits, -1), index);
  Tensor masked = mul(picked, Tensor::from(picked.shape(), std::move(mask)));
  return scale(sum_all(masked), -1.0f / static_cast<float>(count));
}

float temperature_from_rho(float rho) {
  return rho > 0.0f ? rho + std::log1p(std::exp(-rho)) : std::log1p(std::exp(rho));
}

float rho_for_temperature(float tau) {
  if (!(tau > 0.0f)) throw SpecError("temperature must be positive");
  // inverse softplus
  return tau > 20.0f ? tau : std::log(std::expm1(tau));
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, const Tensor& rho,
               std::span<const char> valid) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw StructuralError("kd_loss: student logits " + shape_str(student_logits.shape()) +
                          " vs teacher logits " + shape_str(teacher_logits.shape()));
  }
  if (rho.numel() != 1) throw DimensionError("kd_loss: rho must be a single value");
  const auto rows = student_logits.numel() / student_logits.dim(-1);
  if (!valid.empty() && static_cast<std::int64_t>(valid.size()) != rows) {
    throw DimensionError("kd_loss: " + std::to_string(valid.size()) + " position flags for " +
                         std::to_string(rows) + " positions");
  }
  std::vector<float> mask(static_cast<std::size_t>(rows), 1.0f);
  std::size_t count = static_cast<std::size_t>(rows);
  if (!valid.empty()) {
    count = 0;
    for (std::int64_t i = 0; i < rows; ++i) {
      mask[i] = valid[i] ? 1.0f : 0.0f;
      count += valid[i] != 0;
    }
  }
  if (count == 0) throw InputError("kd_loss: no valid positions");

  Tensor teacher = teacher_logits.detach();
  Tensor tau = softplus(rho);
  Tensor inv_tau = reciprocal(tau);
  Tensor log_p = log_softmax(scale_by(teacher, inv_tau), -1);
  Tensor log_q = log_softmax(scale_by(student_logits, inv_tau), -1);
  Tensor kl = sum(mul(exp(log_p), sub(log_p, log_q)), -1);
  Tensor kl_mean = scale(sum_all(mul(kl, Tensor::from(kl.shape(), std::move(mask)))), 1.0f / static_cast<float>(count));
  return scale_by(kl_mean, mul(tau, tau));
}

void LossWeights::validate() const {
  if (lambda < 0.0f || gamma < 0.0f || !(lambda + gamma > 0.0f)) {
    throw SpecError("loss weights need lambda, gamma >= 0 and lambda + gamma > 0");
  }
}

Stage1Terms stage1_loss(const Model& student, const Model& teacher, const Batch& batch, const LossWeights& weights,
                        const Tensor& rho) {
  weights.validate();
  if (student.config.vocab_size != teacher.config.vocab_size || student.config.hidden != teacher.config.hidden) {
    throw StructuralError("stage1_loss: student (V=" + std::to_string(student.config.vocab_size) +
                          ", h=" + std::to_string(student.config.hidden) + ") and teacher (V=" +
                          std::to_string(teacher.config.vocab_size) + ", h=" + std::to_string(teacher.config.hidden) +
                          ") disagree");
  }
  Tensor teacher_logits;
  {
    NoGradGuard no_grad;
    teacher_logits = forward(teacher, batch.src, batch.tgt_in);
  }
  Tensor student_logits = forward(student, batch.src, batch.tgt_in);
  Stage1Terms terms;
  terms.ce = cross_entropy(student_logits, batch.tgt_out);
  terms.kd = kd_loss(student_logits, teacher_logits, rho, valid_positions(batch.tgt_out));
  terms.total = add(scale(terms.ce, weights.lambda), scale(terms.kd, weights.gamma));
  return terms;
}

// ---------------------------------------------------------------- Adam

void TrainConfig::validate() const {
  if (epochs < 1) throw SpecError("epochs must be at least 1");
  if (!(learning_rate >= 0.0f)) throw SpecError("learning rate must be non-negative");
  if (batch_size < 1) throw SpecError("batch_size must be positive");
  if (clip_norm && !(*clip_norm > 0.0f)) throw SpecError("clip norm must be positive");
}

Adam::Adam(std::vector<Tensor> params, const TrainConfig& config)
    : params_(std::move(params)),
      lr_(config.learning_rate),
      beta1_(config.adam_beta1),
      beta2_(config.adam_beta2),
      eps_(config.adam_eps),
      clip_(config.clip_norm) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
  }
}

double Adam::grad_norm() const {
  double total = 0.0;
  for (const auto& p : params_) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) total += double(g) * g;
  }
  return std::sqrt(total);
}

void Adam::step() {
  ++steps_;
  float factor = 1.0f;
  if (clip_) {
    const double norm = grad_norm();
    if (norm > *clip_) factor = static_cast<float>(*clip_ / norm);
  }
  const double bc1 = 1.0 - std::pow(double(beta1_), double(steps_));
  const double bc2 = 1.0 - std::pow(double(beta2_), double(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.has_grad()) continue;
    auto data = p.mutable_data();
    const auto grad = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const float g = grad[i] * factor;
      m[i] = beta1_ * m[i] + (1.0f - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0f - beta2_) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      data[i] -= static_cast<float>(lr_ * m_hat / (std::sqrt(v_hat) + eps_));
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

// ---------------------------------------------------------------- loop

std::vector<std::vector<std::size_t>> make_batches(const Corpus& corpus, int batch_size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t chunk = static_cast<std::size_t>(batch_size) * 8;
  for (std::size_t begin = 0; begin < order.size(); begin += chunk) {
    const auto end = std::min(order.size(), begin + chunk);
    std::stable_sort(order.begin() + begin, order.begin() + end, [&](std::size_t a, std::size_t b) {
      return corpus.examples[a].source.size() < corpus.examples[b].source.size();
    });
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const auto end = std::min(order.size(), begin + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + begin, order.begin() + end);
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

namespace {

std::vector<std::vector<float>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<float>> out;
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

void restore(std::vector<Tensor>& params, const std::vector<std::vector<float>>& saved) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::copy(saved[k].begin(), saved[k].end(), params[k].mutable_data().begin());
  }
}

constexpr std::size_t kEvalBatch = 50;

}  // namespace

TrainResult train(Model& model, const LossFn& loss_fn, const Corpus& train_set, const Corpus& dev_set,
                  const TrainConfig& config, std::vector<Tensor> extra) {
  config.validate();
  if (train_set.size() == 0) throw InputError("training corpus is empty");
  model.set_trainable(true);
  std::vector<Tensor> params = model.parameters();
  for (auto& t : extra) {
    t.set_requires_grad(true);
    params.push_back(t);
  }
  Adam optimizer(params, config);
  optimizer.zero_grad();

  TrainResult result;
  std::vector<std::vector<float>> best;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    auto batches = make_batches(train_set, config.batch_size, config.seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
    if (config.max_steps_per_epoch > 0 && batches.size() > static_cast<std::size_t>(config.max_steps_per_epoch)) {
      batches.resize(config.max_steps_per_epoch);
    }
    double total = 0.0;
    std::size_t step = 0;
    for (const auto& indices : batches) {
      ++step;
      const Batch batch = make_batch(train_set, indices);
      float value = 0.0f;
      try {
        Tensor loss = loss_fn(model, batch);
        value = loss.item();
        if (!std::isfinite(value)) throw NumericalError("loss is " + std::to_string(value));
        loss.backward();
      } catch (const NumericalError& e) {
        throw NumericalError(fmt::format("training aborted at epoch {} step {}: {}", epoch, step, e.what()));
      }
      optimizer.step();
      total += value;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = total / static_cast<double>(std::max<std::size_t>(1, batches.size()));
    if (dev_set.size() > 0) {
      record.eval_loss = eval_cross_entropy(model, dev_set);
      if (config.eval_wer_limit > 0) {
        record.eval_wer = evaluate(model, dev_set, static_cast<std::size_t>(config.eval_wer_limit)).wer;
      }
    } else {
      record.eval_loss = record.train_loss;
    }
    if (config.verbose) {
      fmt::print(stderr, "epoch {:3d}  train {:.4f}  eval {:.4f}  wer {:.4f}\n", epoch, record.train_loss,
                 record.eval_loss, record.eval_wer);
    }
    if (result.history.empty() || record.eval_loss < result.best_eval_loss) {
      result.best_eval_loss = record.eval_loss;
      result.best_epoch = epoch;
      best = snapshot(params);
    }
    result.history.push_back(record);
  }
  restore(params, best);
  optimizer.zero_grad();
  return result;
}

std::string history_csv(const TrainResult& result) {
  std::string out = "epoch,train_loss,eval_loss,eval_wer\n";
  for (const auto& r : result.history) {
    out += fmt::format("{},{:.6f},{:.6f},{:.6f}\n", r.epoch, r.train_loss, r.eval_loss, r.eval_wer);
  }
  return out;
}

void write_history_csv(const TrainResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << history_csv(result);
}

// ---------------------------------------------------------------- evaluation

double eval_cross_entropy(const Model& model, const Corpus& corpus, std::size_t limit) {
  NoGradGuard no_grad;
  const std::size_t n = limit ? std::min(limit, corpus.size()) : corpus.size();
  if (n == 0) throw InputError("evaluation corpus is empty");
  double nll = 0.0;
  std::size_t tokens = 0;
  for (std::size_t begin = 0; begin < n; begin += kEvalBatch) {
    const auto end = std::min(n, begin + kEvalBatch);
    const Batch batch = make_batch(std::span(corpus.examples).subspan(begin, end - begin));
    const Tensor ce = cross_entropy(forward(model, batch.src, batch.tgt_in), batch.tgt_out);
    nll += double(ce.item()) * batch.target_tokens;
    tokens += static_cast<std::size_t>(batch.target_tokens);
  }
  return nll / static_cast<double>(tokens);
}

std::vector<std::vector<int>> transcribe(const Model& model, std::span<const Example> examples) {
  std::vector<std::vector<int>> out;
  out.reserve(examples.size());
  for (std::size_t begin = 0; begin < examples.size(); begin += kEvalBatch) {
    const auto chunk = examples.subspan(begin, std::min(kEvalBatch, examples.size() - begin));
    const Batch batch = make_batch(chunk);
    DecodeOptions options;
    options.max_new_tokens = std::min(model.config.max_positions, batch.tgt_out.length + 8);
    for (auto& hyp : greedy_decode(model, batch.src, options)) {
      const auto eos = std::find(hyp.begin(), hyp.end(), kEos);
      hyp.erase(eos, hyp.end());
      out.push_back(std::move(hyp));
    }
  }
  return out;
}

EvalResult evaluate(const Model& model, const Corpus& corpus, std::size_t limit, bool decode) {
  EvalResult result;
  const std::size_t n = limit ? std::min(limit, corpus.size()) : corpus.size();
  if (n == 0) throw InputError("evaluation corpus is empty");
  result.sequences = n;
  result.ce = eval_cross_entropy(model, corpus, n);
  if (!decode) return result;
  const auto examples = std::span(corpus.examples).first(n);
  const auto hyps = transcribe(model, examples);
  std::size_t edits = 0, ref_tokens = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    edits += edit_distance(hyps[i], examples[i].target);
    ref_tokens += examples[i].target.size();
    acc += token_accuracy(hyps[i], examples[i].target);
  }
  result.wer = static_cast<double>(edits) / static_cast<double>(ref_tokens);
  result.token_accuracy = acc / static_cast<double>(n);
  return result;
}

}  // namespace tcomp
