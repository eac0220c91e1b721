// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tcomp/surgery.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "tcomp/log.hpp"

namespace tcomp {

MergeSpec MergeSpec::adjacent(int layers, float alpha, float beta) {
  if (layers < 2 || layers % 2 != 0) {
    throw SpecError(fmt::format("layer merging needs an even decoder depth, got {}", layers));
  }
  MergeSpec spec;
  spec.alpha = alpha;
  spec.beta = beta;
  for (int i = 0; i < layers; i += 2) spec.pairs.emplace_back(i, i + 1);
  return spec;
}

namespace {

void check_weights(float alpha, float beta) {
  if (!std::isfinite(alpha) || !std::isfinite(beta) || alpha < 0.0f || beta < 0.0f) {
    throw SpecError(fmt::format("merge weights must be finite and non-negative, got alpha={} beta={}", alpha, beta));
  }
  if (alpha + beta <= 0.0f) throw SpecError("degenerate merge weights: alpha + beta == 0");
}

}  // namespace

void MergeSpec::validate(int layers) const {
  check_weights(alpha, beta);
  if (layers % 2 != 0) throw SpecError(fmt::format("cannot merge an odd number of decoder layers ({})", layers));
  if (static_cast<int>(pairs.size()) * 2 != layers) {
    throw SpecError(fmt::format("{} pairs do not cover {} decoder layers", pairs.size(), layers));
  }
  std::vector<int> seen(static_cast<std::size_t>(layers), 0);
  for (const auto& [i, j] : pairs) {
    if (j != i + 1 || i < 0 || j >= layers) {
      throw SpecError(fmt::format("merge pair ({}, {}) is not two consecutive layers of {}", i, j, layers));
    }
    if (seen[i]++ || seen[j]++) throw SpecError(fmt::format("merge pair ({}, {}) overlaps another pair", i, j));
  }
}

DecoderLayerParams merge_pair(const DecoderLayerParams& a, const DecoderLayerParams& b, float alpha,
                              float beta) {
  check_weights(alpha, beta);
  const auto ta = a.named_tensors();
  const auto tb = b.named_tensors();
  if (ta.size() != tb.size()) throw StructuralError("merge_pair: layers have different tensor lists");
  for (std::size_t k = 0; k < ta.size(); ++k) {
    if (ta[k].first != tb[k].first || ta[k].second.shape() != tb[k].second.shape()) {
      throw StructuralError(fmt::format("merge_pair: {}{} is not congruent with {}{}", ta[k].first,
                                        shape_str(ta[k].second.shape()), tb[k].first,
                                        shape_str(tb[k].second.shape())));
    }
  }
  // Interpolating with t = beta / (alpha + beta) is exact at t = 0 and for
  // equal operands.
  const double t = static_cast<double>(beta) / (static_cast<double>(alpha) + static_cast<double>(beta));
  DecoderLayerParams out = a.clone();
  const auto to = out.named_tensors();
  for (std::size_t k = 0; k < to.size(); ++k) {
    Tensor target = to[k].second;
    auto dst = target.mutable_data();
    const auto xb = tb[k].second.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] = static_cast<float>(std::lerp(static_cast<double>(dst[i]), static_cast<double>(xb[i]), t));
    }
  }
  return out;
}

Model merge_decoder(const Model& model, const MergeSpec& spec) {
  spec.validate(static_cast<int>(model.decoder.size()));
  Model out = model.clone();
  out.decoder.clear();
  for (const auto& [i, j] : spec.pairs) {
    out.decoder.push_back(merge_pair(model.decoder[i], model.decoder[j], spec.alpha, spec.beta));
  }
  out.config.decoder_layers = static_cast<int>(out.decoder.size());
  return out;
}

std::vector<int> sample_kept_layers(int layers, int keep, std::uint64_t seed) {
  if (keep < 1 || keep >= layers) {
    throw SpecError(fmt::format("prune: keep must be in [1, {}), got {}", layers, keep));
  }
  std::vector<int> all(static_cast<std::size_t>(layers));
  std::iota(all.begin(), all.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(keep));
  std::sort(all.begin(), all.end());
  return all;
}

Model prune_layers_random(const Model& model, int keep, std::uint64_t seed) {
  const auto kept = sample_kept_layers(static_cast<int>(model.decoder.size()), keep, seed);
  Model out = model.clone();
  std::vector<DecoderLayerParams> layers;
  for (int i : kept) layers.push_back(std::move(out.decoder[i]));
  out.decoder = std::move(layers);
  out.config.decoder_layers = keep;
  return out;
}

LayerActivations capture_activations(const Model& model, std::span<const Batch> batches) {
  NoGradGuard no_grad;
  LayerActivations acts;
  acts.hidden = model.config.hidden;
  acts.layers.resize(model.decoder.size());
  const auto h = static_cast<std::size_t>(acts.hidden);
  for (const auto& batch : batches) {
    const auto trace = forward_trace(model, batch.src, batch.tgt_in, true);
    for (std::size_t l = 0; l < acts.layers.size(); ++l) {
      const auto data = trace.layer_outputs[l].data();
      for (int b = 0; b < batch.tgt_in.batch; ++b) {
        const int n = batch.tgt_in.row_length(b);
        const float* row = data.data() + static_cast<std::size_t>(b) * batch.tgt_in.length * h;
        acts.layers[l].insert(acts.layers[l].end(), row, row + n * h);
      }
    }
  }
  acts.tokens = acts.layers.empty() ? 0 : static_cast<std::int64_t>(acts.layers[0].size() / h);
  if (acts.tokens == 0) throw InputError("capture_activations: corpus has no target tokens");
  return acts;
}

LayerActivations capture_activations(const Model& model, const Corpus& corpus, int batch_size) {
  if (corpus.examples.empty()) throw InputError("capture_activations: empty corpus");
  std::vector<Batch> batches;
  for (std::size_t i = 0; i < corpus.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto n = std::min(corpus.size() - i, static_cast<std::size_t>(batch_size));
    batches.push_back(make_batch(std::span(corpus.examples).subspan(i, n)));
  }
  return capture_activations(model, batches);
}

SimilarityMatrix similarity_matrix(const LayerActivations& acts, std::string corpus_id) {
  const int L = static_cast<int>(acts.layers.size());
  if (L == 0 || acts.tokens == 0) throw InputError("similarity_matrix: no activations");
  const auto h = static_cast<std::size_t>(acts.hidden);
  SimilarityMatrix m;
  m.layer_count = L;
  m.corpus_id = std::move(corpus_id);
  m.values.assign(static_cast<std::size_t>(L) * L, 0.0f);

  std::vector<std::vector<double>> norms(L, std::vector<double>(acts.tokens));
  for (int l = 0; l < L; ++l) {
    for (std::int64_t t = 0; t < acts.tokens; ++t) {
      const float* v = acts.layers[l].data() + t * h;
      double s = 0.0;
      for (std::size_t i = 0; i < h; ++i) s += static_cast<double>(v[i]) * v[i];
      norms[l][t] = std::sqrt(s);
    }
  }
  for (int a = 0; a < L; ++a) {
    for (int b = a; b < L; ++b) {
      double total = 0.0;
      std::int64_t used = 0;
      for (std::int64_t t = 0; t < acts.tokens; ++t) {
        const double na = norms[a][t], nb = norms[b][t];
        if (na == 0.0 || nb == 0.0) {
          ++m.excluded;
          continue;
        }
        const float* va = acts.layers[a].data() + t * h;
        const float* vb = acts.layers[b].data() + t * h;
        double dot = 0.0;
        for (std::size_t i = 0; i < h; ++i) dot += static_cast<double>(va[i]) * vb[i];
        total += std::clamp(dot / (na * nb), -1.0, 1.0);
        ++used;
      }
      const float v = used ? static_cast<float>(total / static_cast<double>(used)) : 0.0f;
      m.values[static_cast<std::size_t>(a) * L + b] = v;
      m.values[static_cast<std::size_t>(b) * L + a] = v;
    }
  }
  if (m.excluded > 0) {
    log_warning(fmt::format("similarity_matrix: excluded {} zero-norm token comparisons", m.excluded));
  }
  return m;
}

namespace {

double mean_where(const SimilarityMatrix& m, bool (*keep)(int, int, int), int gap) {
  double total = 0.0;
  int n = 0;
  for (int a = 0; a < m.layer_count; ++a) {
    for (int b = a + 1; b < m.layer_count; ++b) {
      if (keep(a, b, gap)) {
        total += m.at(a, b);
        ++n;
      }
    }
  }
  if (n == 0) throw SpecError(fmt::format("no layer pairs at distance {} in a {}-layer matrix", gap, m.layer_count));
  return total / n;
}

}  // namespace

double SimilarityMatrix::adjacent_mean() const {
  return mean_where(*this, [](int a, int b, int) { return b - a == 1; }, 1);
}

double SimilarityMatrix::distant_mean(int min_gap) const {
  return mean_where(*this, [](int a, int b, int gap) { return b - a >= gap; }, min_gap);
}

std::string SimilarityMatrix::summary() const {
  std::string out = fmt::format("layers {}  adjacent mean {:.6f}", layer_count, adjacent_mean());
  if (layer_count > 3) out += fmt::format("  distant(>=3) mean {:.6f}", distant_mean(3));
  if (excluded) out += fmt::format("  excluded {}", excluded);
  return out;
}

std::string similarity_csv(const SimilarityMatrix& matrix) {
  std::string out;
  for (int a = 0; a < matrix.layer_count; ++a) {
    for (int b = 0; b < matrix.layer_count; ++b) {
      if (b) out += ',';
      out += fmt::format("{:.6f}", matrix.at(a, b));
    }
    out += '\n';
  }
  return out;
}

void write_similarity_csv(const SimilarityMatrix& matrix, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << similarity_csv(matrix);
}

}  // namespace tcomp
