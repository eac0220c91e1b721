// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tcomp/bench.hpp"

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <random>

#include "tcomp/data.hpp"

namespace tcomp {

void BenchOptions::validate() const {
  if (batch_size < 1 || tokens < 1 || repeats < 1 || warmup < 0 || source_length < 1) {
    throw SpecError("bench: batch_size, tokens, repeats and source_length must be positive, warmup non-negative");
  }
}

TokenBatch bench_sources(const BenchOptions& options) {
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<int> symbol(task::kActiveBegin, task::kActiveBegin + task::kActiveCount - 1);
  std::vector<std::vector<int>> rows(static_cast<std::size_t>(options.batch_size));
  for (auto& row : rows) {
    for (int t = 0; t < options.source_length; ++t) row.push_back(symbol(rng));
    row.push_back(kEos);
  }
  return TokenBatch::from_rows(rows);
}

namespace {

class FiniteChecksOff {
 public:
  FiniteChecksOff() : previous_(finite_checks()) { set_finite_checks(false); }
  ~FiniteChecksOff() { set_finite_checks(previous_); }
  FiniteChecksOff(const FiniteChecksOff&) = delete;
  FiniteChecksOff& operator=(const FiniteChecksOff&) = delete;

 private:
  bool previous_;
};

void check_positions(const Model& model, const BenchOptions& options) {
  if (options.tokens + 1 > model.config.max_positions) {
    throw SpecError(fmt::format("bench: {} tokens need {} decoder positions, model has {}", options.tokens,
                                options.tokens + 1, model.config.max_positions));
  }
}

BenchReport empty_report(const Model& model, const BenchOptions& options, std::string model_id) {
  BenchReport report;
  report.model_id = std::move(model_id);
  report.decoder_layers = model.config.decoder_layers;
  report.params = model.parameter_count();
  report.batch_size = options.batch_size;
  report.tokens_decoded_per_seq = options.tokens;
  report.warmup_runs = options.warmup;
  report.repeats = options.repeats;
  return report;
}

void timed_run(const Model& model, const TokenBatch& src, const DecodeOptions& decode, BenchReport& report) {
  const auto t0 = std::chrono::steady_clock::now();
  auto out = greedy_decode(model, src, decode);
  const auto t1 = std::chrono::steady_clock::now();
  report.run_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  for (const auto& row : out) {
    if (static_cast<int>(row.size()) != decode.max_new_tokens) {
      throw NumericalError(fmt::format("bench: decoded {} tokens instead of {}", row.size(), decode.max_new_tokens));
    }
  }
  report.outputs = std::move(out);
}

void finish(BenchReport& report) {
  auto sorted = report.run_seconds;
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  report.wall_seconds = median * report.repeats;
  report.tokens_per_second =
      static_cast<double>(report.batch_size) * report.tokens_decoded_per_seq * report.repeats / report.wall_seconds;
}

DecodeOptions fixed_length(const BenchOptions& options) {
  DecodeOptions decode;
  decode.max_new_tokens = options.tokens;
  decode.suppress_eos = true;
  return decode;
}

}  // namespace

BenchReport bench(const Model& model, const BenchOptions& options) {
  options.validate();
  check_positions(model, options);
  FiniteChecksOff checks_off;
  const TokenBatch src = bench_sources(options);
  const DecodeOptions decode = fixed_length(options);
  BenchReport report = empty_report(model, options, options.model_id);
  for (int i = 0; i < options.warmup; ++i) greedy_decode(model, src, decode);
  for (int i = 0; i < options.repeats; ++i) timed_run(model, src, decode, report);
  finish(report);
  return report;
}

std::vector<BenchReport> bench_interleaved(const std::vector<const Model*>& models,
                                           const std::vector<std::string>& model_ids, const BenchOptions& options) {
  options.validate();
  if (models.empty() || models.size() != model_ids.size()) {
    throw SpecError("bench_interleaved: need one id per model");
  }
  for (const Model* m : models) check_positions(*m, options);
  FiniteChecksOff checks_off;
  const TokenBatch src = bench_sources(options);
  const DecodeOptions decode = fixed_length(options);
  std::vector<BenchReport> reports;
  for (std::size_t k = 0; k < models.size(); ++k) reports.push_back(empty_report(*models[k], options, model_ids[k]));
  for (int i = 0; i < options.warmup; ++i)
    for (const Model* m : models) greedy_decode(*m, src, decode);
  const std::size_t n = models.size();
  for (int i = 0; i < options.repeats; ++i) {
    // Rotate the starting model so no model always runs first.
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t k = (j + static_cast<std::size_t>(i)) % n;
      timed_run(*models[k], src, decode, reports[k]);
    }
  }
  for (auto& r : reports) finish(r);
  return reports;
}

std::string bench_report_json(const BenchReport& r) {
  nlohmann::json j = {{"model_id", r.model_id},
                      {"tokens_per_second", r.tokens_per_second},
                      {"decoder_layers", r.decoder_layers},
                      {"params", r.params},
                      {"batch_size", r.batch_size},
                      {"tokens_decoded_per_seq", r.tokens_decoded_per_seq},
                      {"wall_seconds", r.wall_seconds},
                      {"warmup_runs", r.warmup_runs},
                      {"repeats", r.repeats},
                      {"run_seconds", r.run_seconds}};
  return j.dump(2);
}

}  // namespace tcomp
