// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder surgery: merging adjacent layers, the random-pruning baseline and
// layer-to-layer activation similarity.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tcomp/data.hpp"
#include "tcomp/model.hpp"

namespace tcomp {

/// Pairs of consecutive decoder layers (0-based) and the merge weights.
struct MergeSpec {
  std::vector<std::pair<int, int>> pairs;
  float alpha = 0.25f;
  float beta = 0.75f;

  // (0,1), (2,3), ... for an even layer count.
  static MergeSpec adjacent(int layers, float alpha = 0.25f, float beta = 0.75f);
  void validate(int layers) const;  // throws SpecError
};

/// (alpha * a + beta * b) / (alpha + beta), tensor by tensor.
DecoderLayerParams merge_pair(const DecoderLayerParams& a, const DecoderLayerParams& b, float alpha,
                              float beta);

/// Copy of the model whose decoder holds one merged layer per pair.
Model merge_decoder(const Model& model, const MergeSpec& spec);

/// Copy keeping `keep` decoder layers drawn uniformly without replacement,
/// in their original order.
Model prune_layers_random(const Model& model, int keep, std::uint64_t seed);
std::vector<int> sample_kept_layers(int layers, int keep, std::uint64_t seed);

/// Decoder residual stream after every layer, at each non-PAD target
/// position. layers[l] is [tokens, hidden] row-major.
struct LayerActivations {
  int hidden = 0;
  std::int64_t tokens = 0;
  std::vector<std::vector<float>> layers;
};

LayerActivations capture_activations(const Model& model, std::span<const Batch> batches);
LayerActivations capture_activations(const Model& model, const Corpus& corpus, int batch_size = 50);

struct SimilarityMatrix {
  int layer_count = 0;
  std::vector<float> values;  // row-major [L, L]
  std::string corpus_id;
  std::int64_t excluded = 0;  // token pairs dropped for a zero-norm vector

  float at(int a, int b) const { return values[static_cast<std::size_t>(a) * layer_count + b]; }
  // Mean over pairs with |a - b| == 1.
  double adjacent_mean() const;
  // Mean over pairs with |a - b| >= min_gap.
  double distant_mean(int min_gap = 3) const;
  std::string summary() const;
};

/// Entry (a, b) is the mean per-token cosine between layers a and b.
SimilarityMatrix similarity_matrix(const LayerActivations& activations, std::string corpus_id = "");

/// L lines of L comma-separated values, six decimals.
std::string similarity_csv(const SimilarityMatrix& matrix);
void write_similarity_csv(const SimilarityMatrix& matrix, const std::filesystem::path& path);

}  // namespace tcomp
