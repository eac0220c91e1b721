// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy pre-norm encoder-decoder transformer with a tied token embedding.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tcomp/tensor.hpp"

namespace tcomp {

inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kPad = 2;

struct ModelConfig {
  int vocab_size = 512;
  int hidden = 64;
  int encoder_layers = 2;
  int decoder_layers = 6;
  int heads = 4;
  int ffn_dim = 256;
  int max_positions = 320;
  std::optional<int> rank;  // set once the embedding is factored

  void validate() const;  // throws SpecError
  int head_dim() const { return hidden / heads; }

  static ModelConfig toy();
  // Whisper-base dimensions; max_positions follows the audio context (1500).
  static ModelConfig whisper_base_like();

  bool operator==(const ModelConfig&) const = default;
};

/// Exact parameter total for a config, embeddings and positions included.
std::int64_t param_count(const ModelConfig& config);
std::int64_t decoder_layer_param_count(const ModelConfig& config);
std::int64_t encoder_layer_param_count(const ModelConfig& config);
std::int64_t embedding_param_count(const ModelConfig& config);

using NamedTensor = std::pair<std::string, Tensor>;

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct AttentionParams {
  Linear q, k, v, o;
};

struct FeedForwardParams {
  Linear up;    // [h, ffn]
  Linear down;  // [ffn, h]
};

struct EncoderLayerParams {
  LayerNormParams ln_attn;
  AttentionParams attn;
  LayerNormParams ln_ffn;
  FeedForwardParams ffn;

  std::vector<NamedTensor> named_tensors() const;
};

/// One decoder layer; the flat tensor list is what layer merging averages.
struct DecoderLayerParams {
  LayerNormParams ln_self;
  AttentionParams self_attn;
  LayerNormParams ln_cross;
  AttentionParams cross_attn;
  LayerNormParams ln_ffn;
  FeedForwardParams ffn;

  // Handles share storage with the layer, in a fixed order.
  std::vector<NamedTensor> named_tensors() const;
  DecoderLayerParams clone() const;
};

/// E ~ e1 * e2 with e1: [V, r], e2: [r, h].
struct LowRankEmbedding {
  Tensor e1;
  Tensor e2;
  int rank() const { return static_cast<int>(e1.dim(1)); }
  std::int64_t param_count() const { return e1.numel() + e2.numel(); }
};

/// Tied input/output embedding, dense or factored. Both paths read the
/// same tensors, so tying survives any update.
struct TokenEmbedding {
  Tensor table;  // [V, h]; undefined when factored
  std::optional<LowRankEmbedding> factors;

  bool factored() const { return factors.has_value(); }
  // ids laid out as shape; returns shape + [h]
  Tensor lookup(std::span<const int> ids, Shape shape) const;
  // [..., h] -> [..., V]
  Tensor project(const Tensor& hidden) const;
};

struct Model {
  ModelConfig config;
  TokenEmbedding embedding;
  Tensor encoder_positions;  // [max_positions, h]
  Tensor decoder_positions;  // [max_positions, h]
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  LayerNormParams encoder_norm;
  LayerNormParams decoder_norm;

  static Model init(const ModelConfig& config, std::uint64_t seed);

  // Fresh storage for every tensor; tying is preserved in the copy.
  Model clone() const;
  // Each distinct tensor once, names stable across save/load.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::int64_t parameter_count() const;
  void set_trainable(bool trainable);
  void zero_grad();
};

/// Padded token ids, row-major [batch, length].
struct TokenBatch {
  int batch = 0;
  int length = 0;
  std::vector<int> ids;

  int at(int b, int t) const { return ids[static_cast<std::size_t>(b) * length + t]; }
  // Count of leading non-PAD tokens in row b.
  int row_length(int b) const;
  static TokenBatch from_rows(const std::vector<std::vector<int>>& rows);
};

struct ForwardTrace {
  Tensor logits;          // [B, T, V]
  Tensor decoder_output;  // o after the final norm, [B, T, h]
  std::vector<Tensor> layer_outputs;  // residual stream after each decoder layer
};

Tensor encode(const Model& model, const TokenBatch& src);
ForwardTrace forward_trace(const Model& model, const TokenBatch& src, const TokenBatch& tgt,
                           bool keep_layer_outputs = false);
Tensor forward(const Model& model, const TokenBatch& src, const TokenBatch& tgt);

/// Step-wise decoder with a per-sequence key/value cache. No gradient.
class CachedDecoder {
 public:
  CachedDecoder(const Model& model, const TokenBatch& src);
  // One token per sequence in, logits [batch * V] out.
  std::span<const float> step(std::span<const int> tokens);
  int position() const { return position_; }
  int batch() const { return batch_; }

 private:
  struct LayerCache {
    FloatBuffer self_k, self_v;    // [B, max_positions, h]
    FloatBuffer cross_k, cross_v;  // [B, S, h]
  };
  const Model& model_;
  int batch_ = 0;
  int src_len_ = 0;
  int position_ = 0;
  std::vector<int> src_valid_;
  std::vector<LayerCache> caches_;
  FloatBuffer logits_;
};

struct DecodeOptions {
  int max_new_tokens = 64;
  // Never emit EOS; every sequence runs to max_new_tokens.
  bool suppress_eos = false;
};

/// Greedy argmax decode from BOS. Output rows hold emitted tokens, EOS
/// included when produced.
std::vector<std::vector<int>> greedy_decode(const Model& model, const TokenBatch& src,
                                            const DecodeOptions& options);

}  // namespace tcomp
