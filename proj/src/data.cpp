// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tcomp/data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace tcomp {

std::string split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kDev: return "dev";
    case Split::kTest: return "test";
  }
  return "unknown";
}

Corpus Corpus::head_fraction(double fraction) const {
  Corpus out;
  out.split = split;
  out.seed = seed;
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(fraction * static_cast<double>(size())));
  out.examples.assign(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(std::min(n, size())));
  return out;
}

namespace {

Example draw_example(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> length(task::kMinLength, task::kMaxLength);
  std::uniform_int_distribution<int> active(task::kActiveBegin, task::kActiveBegin + task::kActiveCount - 1);
  std::uniform_int_distribution<int> foreign(task::kForeignBegin, task::kForeignBegin + task::kForeignCount - 1);
  std::uniform_int_distribution<int> splice_len(task::kMinSplice, task::kMaxSplice);
  std::bernoulli_distribution splice(task::kSpliceRate);

  const int total = length(rng);
  const int seg = splice(rng) ? splice_len(rng) : 0;
  std::vector<int> body(total - seg);
  for (auto& t : body) t = active(rng);
  std::vector<int> segment(seg);
  for (auto& t : segment) t = foreign(rng);
  const int at = std::uniform_int_distribution<int>(0, static_cast<int>(body.size()))(rng);

  Example ex;
  ex.source.insert(ex.source.end(), body.begin(), body.begin() + at);
  ex.source.insert(ex.source.end(), segment.begin(), segment.end());
  ex.source.insert(ex.source.end(), body.begin() + at, body.end());
  // Mirror the active symbols; the foreign run keeps its internal order.
  ex.target.insert(ex.target.end(), body.rbegin(), body.rend() - at);
  ex.target.insert(ex.target.end(), segment.begin(), segment.end());
  ex.target.insert(ex.target.end(), body.rend() - at, body.rend());
  return ex;
}

Corpus draw_split(std::uint64_t seed, Split split, int count, std::set<std::vector<int>>& taken) {
  std::seed_seq seq{seed, static_cast<std::uint64_t>(split) + 1, std::uint64_t{0x7c0a}};
  std::mt19937_64 rng(seq);
  Corpus corpus;
  corpus.split = split;
  corpus.seed = seed;
  corpus.examples.reserve(count);
  while (static_cast<int>(corpus.examples.size()) < count) {
    Example ex = draw_example(rng);
    if (taken.insert(ex.source).second) corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

}  // namespace

CorpusSet generate_corpus(std::uint64_t seed, const CorpusSizes& sizes) {
  std::set<std::vector<int>> taken;
  CorpusSet set;
  set.train = draw_split(seed, Split::kTrain, sizes.train, taken);
  set.dev = draw_split(seed, Split::kDev, sizes.dev, taken);
  set.test = draw_split(seed, Split::kTest, sizes.test, taken);
  return set;
}

Batch make_batch(std::span<const Example> examples) {
  std::vector<std::vector<int>> src, tgt_in, tgt_out;
  Batch batch;
  for (const auto& ex : examples) {
    auto s = ex.source;
    s.push_back(kEos);
    src.push_back(std::move(s));
    std::vector<int> in{kBos};
    in.insert(in.end(), ex.target.begin(), ex.target.end());
    tgt_in.push_back(std::move(in));
    auto out = ex.target;
    out.push_back(kEos);
    batch.target_tokens += static_cast<int>(out.size());
    tgt_out.push_back(std::move(out));
  }
  batch.src = TokenBatch::from_rows(src);
  batch.tgt_in = TokenBatch::from_rows(tgt_in);
  batch.tgt_out = TokenBatch::from_rows(tgt_out);
  return batch;
}

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices) {
  std::vector<Example> picked;
  picked.reserve(indices.size());
  for (auto i : indices) picked.push_back(corpus.examples.at(i));
  return make_batch(picked);
}

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double wer(std::span<const int> hypothesis, std::span<const int> reference) {
  if (reference.empty()) throw InputError("wer: reference sequence is empty");
  return static_cast<double>(edit_distance(hypothesis, reference)) / static_cast<double>(reference.size());
}

double token_accuracy(std::span<const int> hypothesis, std::span<const int> reference) {
  return std::max(0.0, 1.0 - wer(hypothesis, reference));
}

namespace {

std::string join(const std::vector<int>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(ids[i]);
  }
  return out;
}

std::vector<int> parse_ids(const std::string& text, const std::filesystem::path& path, std::size_t line_no) {
  std::istringstream in(text);
  std::vector<int> ids;
  std::string tok;
  while (in >> tok) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size() || v < 0) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad token id '" + tok + "'");
    }
    ids.push_back(v);
  }
  if (ids.empty()) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": empty sequence");
  return ids;
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto& ex : corpus.examples) out << join(ex.source) << '\t' << join(ex.target) << '\n';
}

Corpus read_corpus(const std::filesystem::path& path, Split split) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open corpus file " + path.string());
  Corpus corpus;
  corpus.split = split;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": missing tab separator");
    }
    corpus.examples.push_back({parse_ids(line.substr(0, tab), path, line_no),
                               parse_ids(line.substr(tab + 1), path, line_no)});
  }
  return corpus;
}

void write_corpus_set(const CorpusSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_corpus(set.train, dir / "train.txt");
  write_corpus(set.dev, dir / "dev.txt");
  write_corpus(set.test, dir / "test.txt");
}

CorpusSet read_corpus_set(const std::filesystem::path& dir) {
  return {read_corpus(dir / "train.txt", Split::kTrain), read_corpus(dir / "dev.txt", Split::kDev),
          read_corpus(dir / "test.txt", Split::kTest)};
}

}  // namespace tcomp
