// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic transduction corpus and the token-level WER metric.
//
// The task reverses a sequence of "active" symbols. One example in ten also
// carries a short run of "foreign" symbols that must be copied through
// verbatim at the mirrored position. Only 43 of the 512 vocabulary ids are
// ever used, so most embedding rows are dead weight.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tcomp/model.hpp"

namespace tcomp {

namespace task {
inline constexpr int kActiveBegin = 3;
inline constexpr int kActiveCount = 30;
inline constexpr int kForeignBegin = kActiveBegin + kActiveCount;
inline constexpr int kForeignCount = 10;
inline constexpr int kMinLength = 8;
inline constexpr int kMaxLength = 32;
inline constexpr double kSpliceRate = 0.10;
inline constexpr int kMinSplice = 1;
inline constexpr int kMaxSplice = 3;

inline bool is_foreign(int id) { return id >= kForeignBegin && id < kForeignBegin + kForeignCount; }
}  // namespace task

struct Example {
  std::vector<int> source;
  std::vector<int> target;
  bool operator==(const Example&) const = default;
};

enum class Split { kTrain, kDev, kTest };
std::string split_name(Split split);

struct Corpus {
  std::vector<Example> examples;
  Split split = Split::kTrain;
  std::uint64_t seed = 0;

  std::size_t size() const { return examples.size(); }
  // First `fraction` of the examples (at least one).
  Corpus head_fraction(double fraction) const;
};

struct CorpusSizes {
  int train = 8000;
  int dev = 500;
  int test = 500;
};

struct CorpusSet {
  Corpus train;
  Corpus dev;
  Corpus test;
};

/// Deterministic per seed; each split draws from its own stream and no
/// source sequence appears in two splits.
CorpusSet generate_corpus(std::uint64_t seed, const CorpusSizes& sizes = {});

/// Model-ready tensors for a group of examples: the source gets EOS
/// appended, the decoder input is BOS + target, the label is target + EOS.
struct Batch {
  TokenBatch src;
  TokenBatch tgt_in;
  TokenBatch tgt_out;
  int target_tokens = 0;  // non-PAD label count
};

Batch make_batch(std::span<const Example> examples);
Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices);

/// Levenshtein distance over tokens divided by the reference length.
double wer(std::span<const int> hypothesis, std::span<const int> reference);
std::size_t edit_distance(std::span<const int> a, std::span<const int> b);
/// max(0, 1 - wer); the per-sequence score averaged for accuracy reports.
double token_accuracy(std::span<const int> hypothesis, std::span<const int> reference);

/// One example per line: source ids, a tab, target ids (space separated).
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus read_corpus(const std::filesystem::path& path, Split split);
void write_corpus_set(const CorpusSet& set, const std::filesystem::path& dir);
CorpusSet read_corpus_set(const std::filesystem::path& dir);

}  // namespace tcomp
