// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Fixed-length greedy decode throughput.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tcomp/model.hpp"

namespace tcomp {

struct BenchOptions {
  int batch_size = 10;
  int tokens = 256;
  int repeats = 5;
  int warmup = 2;
  std::uint64_t seed = 0;
  int source_length = 24;
  std::string model_id = "model";

  void validate() const;  // throws SpecError
};

struct BenchReport {
  std::string model_id;
  double tokens_per_second = 0.0;
  int decoder_layers = 0;
  std::int64_t params = 0;
  int batch_size = 0;
  int tokens_decoded_per_seq = 0;
  // repeats x median run time, so that
  // tokens_per_second == batch_size * tokens_decoded_per_seq * repeats / wall_seconds
  double wall_seconds = 0.0;
  int warmup_runs = 0;
  int repeats = 0;
  std::vector<double> run_seconds;        // timed runs, warmup excluded
  std::vector<std::vector<int>> outputs;  // tokens of the last timed run
};

/// Source batch used by bench: seeded random task symbols plus EOS.
TokenBatch bench_sources(const BenchOptions& options);

/// Decodes with EOS suppressed so every run emits exactly `tokens` tokens
/// per sequence. Finite checks are switched off for the duration.
BenchReport bench(const Model& model, const BenchOptions& options);

/// Benchmarks several models in one session, alternating them run by run
/// so that slow drift in machine speed affects all of them alike.
std::vector<BenchReport> bench_interleaved(const std::vector<const Model*>& models,
                                           const std::vector<std::string>& model_ids, const BenchOptions& options);

std::string bench_report_json(const BenchReport& report);

}  // namespace tcomp
