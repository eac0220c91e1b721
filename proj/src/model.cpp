// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tcomp/model.hpp"

#include <cmath>
#include <random>

namespace tcomp {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw SpecError("invalid model config: " + what); };
  if (vocab_size < 4) fail("vocab_size must leave room for BOS/EOS/PAD and symbols");
  if (hidden < 2) fail("hidden must be at least 2");
  if (heads < 1 || hidden % heads != 0) fail("hidden must be divisible by heads");
  if (encoder_layers < 0 || decoder_layers < 1) fail("layer counts out of range");
  if (ffn_dim < 1 || max_positions < 1) fail("ffn_dim and max_positions must be positive");
  if (rank && (*rank < 1 || *rank >= std::min(vocab_size, hidden))) {
    fail("rank " + std::to_string(*rank) + " must satisfy 1 <= r < min(V, h)");
  }
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::whisper_base_like() {
  ModelConfig c;
  c.vocab_size = 51865;
  c.hidden = 512;
  c.encoder_layers = 6;
  c.decoder_layers = 6;
  c.heads = 8;
  c.ffn_dim = 2048;
  c.max_positions = 1500;
  return c;
}

namespace {

std::int64_t attention_params(std::int64_t h) { return 4 * h * h + 4 * h; }
std::int64_t ffn_params(std::int64_t h, std::int64_t f) { return h * f + f + f * h + h; }

}  // namespace

std::int64_t encoder_layer_param_count(const ModelConfig& c) {
  const std::int64_t h = c.hidden;
  return attention_params(h) + ffn_params(h, c.ffn_dim) + 2 * 2 * h;
}

std::int64_t decoder_layer_param_count(const ModelConfig& c) {
  const std::int64_t h = c.hidden;
  return 2 * attention_params(h) + ffn_params(h, c.ffn_dim) + 3 * 2 * h;
}

std::int64_t embedding_param_count(const ModelConfig& c) {
  const std::int64_t v = c.vocab_size, h = c.hidden;
  return c.rank ? v * *c.rank + static_cast<std::int64_t>(*c.rank) * h : v * h;
}

std::int64_t param_count(const ModelConfig& c) {
  c.validate();
  const std::int64_t h = c.hidden;
  return embedding_param_count(c) + 2 * static_cast<std::int64_t>(c.max_positions) * h +
         c.encoder_layers * encoder_layer_param_count(c) + c.decoder_layers * decoder_layer_param_count(c) +
         2 * 2 * h;
}

// ---------------------------------------------------------------- parameters

namespace {

void append(std::vector<NamedTensor>& out, const std::string& prefix, const Linear& l) {
  out.emplace_back(prefix + ".weight", l.weight);
  out.emplace_back(prefix + ".bias", l.bias);
}

void append(std::vector<NamedTensor>& out, const std::string& prefix, const LayerNormParams& n) {
  out.emplace_back(prefix + ".gain", n.gain);
  out.emplace_back(prefix + ".bias", n.bias);
}

void append(std::vector<NamedTensor>& out, const std::string& prefix, const AttentionParams& a) {
  append(out, prefix + ".q", a.q);
  append(out, prefix + ".k", a.k);
  append(out, prefix + ".v", a.v);
  append(out, prefix + ".o", a.o);
}

void append(std::vector<NamedTensor>& out, const std::string& prefix, const FeedForwardParams& f) {
  append(out, prefix + ".up", f.up);
  append(out, prefix + ".down", f.down);
}

Linear clone(const Linear& l) { return {l.weight.clone(), l.bias.clone()}; }
LayerNormParams clone(const LayerNormParams& n) { return {n.gain.clone(), n.bias.clone()}; }
AttentionParams clone(const AttentionParams& a) { return {clone(a.q), clone(a.k), clone(a.v), clone(a.o)}; }
FeedForwardParams clone(const FeedForwardParams& f) { return {clone(f.up), clone(f.down)}; }

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Shape shape, float stddev) {
    std::normal_distribution<float> dist(0.0f, stddev);
    std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = dist(rng_);
    return Tensor::from(std::move(shape), std::move(v), true);
  }

  Linear linear(int in, int out, float gain = 1.0f) {
    return {normal({in, out}, gain / std::sqrt(static_cast<float>(in))), Tensor::zeros({out}, true)};
  }

  LayerNormParams norm(int h) { return {Tensor::full({h}, 1.0f, true), Tensor::zeros({h}, true)}; }

  AttentionParams attention(int h, float out_gain) {
    return {linear(h, h), linear(h, h), linear(h, h), linear(h, h, out_gain)};
  }

  FeedForwardParams ffn(int h, int f, float out_gain) { return {linear(h, f), linear(f, h, out_gain)}; }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

std::vector<NamedTensor> EncoderLayerParams::named_tensors() const {
  std::vector<NamedTensor> out;
  append(out, "ln_attn", ln_attn);
  append(out, "attn", attn);
  append(out, "ln_ffn", ln_ffn);
  append(out, "ffn", ffn);
  return out;
}

std::vector<NamedTensor> DecoderLayerParams::named_tensors() const {
  std::vector<NamedTensor> out;
  append(out, "ln_self", ln_self);
  append(out, "self_attn", self_attn);
  append(out, "ln_cross", ln_cross);
  append(out, "cross_attn", cross_attn);
  append(out, "ln_ffn", ln_ffn);
  append(out, "ffn", ffn);
  return out;
}

DecoderLayerParams DecoderLayerParams::clone() const {
  return {tcomp::clone(ln_self), tcomp::clone(self_attn), tcomp::clone(ln_cross),
          tcomp::clone(cross_attn), tcomp::clone(ln_ffn), tcomp::clone(ffn)};
}

Tensor TokenEmbedding::lookup(std::span<const int> ids, Shape shape) const {
  if (factored()) return matmul(embedding(factors->e1, ids, std::move(shape)), factors->e2);
  return embedding(table, ids, std::move(shape));
}

Tensor TokenEmbedding::project(const Tensor& hidden) const {
  if (factored()) return matmul_nt(matmul_nt(hidden, factors->e2), factors->e1);
  return matmul_nt(hidden, table);
}

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  if (config.rank) throw SpecError("Model::init builds dense embeddings; factor them with decompose_embedding");
  Initializer init(seed);
  const int h = config.hidden;
  const float emb_std = 1.0f / std::sqrt(static_cast<float>(h));
  const float enc_out = 1.0f / std::sqrt(2.0f * std::max(1, config.encoder_layers));
  const float dec_out = 1.0f / std::sqrt(3.0f * config.decoder_layers);

  Model m;
  m.config = config;
  m.embedding.table = init.normal({config.vocab_size, h}, emb_std);
  m.encoder_positions = init.normal({config.max_positions, h}, emb_std);
  m.decoder_positions = init.normal({config.max_positions, h}, emb_std);
  for (int i = 0; i < config.encoder_layers; ++i) {
    EncoderLayerParams l;
    l.ln_attn = init.norm(h);
    l.attn = init.attention(h, enc_out);
    l.ln_ffn = init.norm(h);
    l.ffn = init.ffn(h, config.ffn_dim, enc_out);
    m.encoder.push_back(std::move(l));
  }
  for (int i = 0; i < config.decoder_layers; ++i) {
    DecoderLayerParams l;
    l.ln_self = init.norm(h);
    l.self_attn = init.attention(h, dec_out);
    l.ln_cross = init.norm(h);
    l.cross_attn = init.attention(h, dec_out);
    l.ln_ffn = init.norm(h);
    l.ffn = init.ffn(h, config.ffn_dim, dec_out);
    m.decoder.push_back(std::move(l));
  }
  m.encoder_norm = init.norm(h);
  m.decoder_norm = init.norm(h);
  return m;
}

Model Model::clone() const {
  Model m;
  m.config = config;
  if (embedding.factored()) {
    m.embedding.factors = LowRankEmbedding{embedding.factors->e1.clone(), embedding.factors->e2.clone()};
  } else {
    m.embedding.table = embedding.table.clone();
  }
  m.encoder_positions = encoder_positions.clone();
  m.decoder_positions = decoder_positions.clone();
  for (const auto& l : encoder) {
    m.encoder.push_back({tcomp::clone(l.ln_attn), tcomp::clone(l.attn), tcomp::clone(l.ln_ffn), tcomp::clone(l.ffn)});
  }
  for (const auto& l : decoder) m.decoder.push_back(l.clone());
  m.encoder_norm = tcomp::clone(encoder_norm);
  m.decoder_norm = tcomp::clone(decoder_norm);
  return m;
}

std::vector<NamedTensor> Model::named_parameters() const {
  std::vector<NamedTensor> out;
  if (embedding.factored()) {
    out.emplace_back("embed.e1", embedding.factors->e1);
    out.emplace_back("embed.e2", embedding.factors->e2);
  } else {
    out.emplace_back("embed.table", embedding.table);
  }
  out.emplace_back("encoder.positions", encoder_positions);
  out.emplace_back("decoder.positions", decoder_positions);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    for (auto& [name, t] : encoder[i].named_tensors()) {
      out.emplace_back("encoder." + std::to_string(i) + "." + name, t);
    }
  }
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    for (auto& [name, t] : decoder[i].named_tensors()) {
      out.emplace_back("decoder." + std::to_string(i) + "." + name, t);
    }
  }
  append(out, "encoder_norm", encoder_norm);
  append(out, "decoder_norm", decoder_norm);
  return out;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::int64_t Model::parameter_count() const {
  std::int64_t n = 0;
  for (auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

void Model::set_trainable(bool trainable) {
  for (auto& t : parameters()) t.set_requires_grad(trainable);
}

void Model::zero_grad() {
  for (auto& t : parameters()) t.zero_grad();
}

// ---------------------------------------------------------------- batches

int TokenBatch::row_length(int b) const {
  int n = 0;
  while (n < length && at(b, n) != kPad) ++n;
  return n;
}

TokenBatch TokenBatch::from_rows(const std::vector<std::vector<int>>& rows) {
  TokenBatch batch;
  batch.batch = static_cast<int>(rows.size());
  for (const auto& r : rows) batch.length = std::max(batch.length, static_cast<int>(r.size()));
  batch.ids.assign(static_cast<std::size_t>(batch.batch) * batch.length, kPad);
  for (int b = 0; b < batch.batch; ++b) {
    std::copy(rows[b].begin(), rows[b].end(), batch.ids.begin() + static_cast<std::ptrdiff_t>(b) * batch.length);
  }
  return batch;
}

// ---------------------------------------------------------------- forward

namespace {

void validate_tokens(const ModelConfig& config, const TokenBatch& tokens, const char* which) {
  if (tokens.batch < 1 || tokens.length < 1) throw InputError(std::string(which) + " batch is empty");
  if (tokens.length > config.max_positions) {
    throw InputError(std::string(which) + " length " + std::to_string(tokens.length) + " exceeds max_positions " +
                     std::to_string(config.max_positions));
  }
  for (int id : tokens.ids) {
    if (id < 0 || id >= config.vocab_size) {
      throw InputError(std::string(which) + " token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(config.vocab_size));
    }
  }
}

constexpr float kMasked = -1e9f;

// Additive mask [B*H, Tq, Tk]: PAD keys are blocked, and with causal set,
// keys after the query position too.
Tensor attention_mask(const TokenBatch& keys, int heads, int tq, bool causal) {
  const int b_count = keys.batch, tk = keys.length;
  std::vector<float> mask(static_cast<std::size_t>(b_count) * heads * tq * tk, 0.0f);
  for (int b = 0; b < b_count; ++b) {
    for (int hd = 0; hd < heads; ++hd) {
      float* m = mask.data() + (static_cast<std::size_t>(b) * heads + hd) * tq * tk;
      for (int i = 0; i < tq; ++i) {
        for (int j = 0; j < tk; ++j) {
          const bool blocked = causal ? j > i : keys.at(b, j) == kPad;
          if (blocked) m[i * tk + j] = kMasked;
        }
      }
    }
  }
  return Tensor::from({static_cast<std::int64_t>(b_count) * heads, tq, tk}, std::move(mask));
}

Tensor split_heads(const Tensor& x, int heads) {
  const auto b = x.dim(0), t = x.dim(1), h = x.dim(2);
  const auto dh = h / heads;
  return reshape(transpose(reshape(x, {b, t, heads, dh}), 1, 2), {b * heads, t, dh});
}

Tensor merge_heads(const Tensor& x, std::int64_t batch, int heads) {
  const auto t = x.dim(1), dh = x.dim(2);
  return reshape(transpose(reshape(x, {batch, heads, t, dh}), 1, 2), {batch, t, heads * dh});
}

Tensor attention(const Tensor& query_in, const Tensor& kv_in, const AttentionParams& p, const Tensor& mask,
                 int heads) {
  const auto batch = query_in.dim(0);
  const auto dh = query_in.dim(2) / heads;
  Tensor q = split_heads(linear(query_in, p.q.weight, p.q.bias), heads);
  Tensor k = split_heads(linear(kv_in, p.k.weight, p.k.bias), heads);
  Tensor v = split_heads(linear(kv_in, p.v.weight, p.v.bias), heads);
  Tensor scores = add(scale(bmm(q, k, true), 1.0f / std::sqrt(static_cast<float>(dh))), mask);
  Tensor ctx = bmm(softmax(scores, -1), v);
  return linear(merge_heads(ctx, batch, heads), p.o.weight, p.o.bias);
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  return linear(gelu(linear(x, p.up.weight, p.up.bias)), p.down.weight, p.down.bias);
}

Tensor norm(const Tensor& x, const LayerNormParams& p) { return layer_norm(x, p.gain, p.bias); }

Tensor embed_with_positions(const Model& model, const TokenBatch& tokens, const Tensor& positions) {
  std::vector<int> pos(tokens.ids.size());
  for (int b = 0; b < tokens.batch; ++b) {
    for (int t = 0; t < tokens.length; ++t) pos[static_cast<std::size_t>(b) * tokens.length + t] = t;
  }
  Tensor tok = model.embedding.lookup(tokens.ids, {tokens.batch, tokens.length});
  return add(tok, embedding(positions, pos, {tokens.batch, tokens.length}));
}

}  // namespace

Tensor encode(const Model& model, const TokenBatch& src) {
  validate_tokens(model.config, src, "source");
  const int heads = model.config.heads;
  Tensor mask = attention_mask(src, heads, src.length, false);
  Tensor x = embed_with_positions(model, src, model.encoder_positions);
  for (const auto& layer : model.encoder) {
    Tensor a = norm(x, layer.ln_attn);
    x = add(x, attention(a, a, layer.attn, mask, heads));
    x = add(x, feed_forward(norm(x, layer.ln_ffn), layer.ffn));
  }
  return norm(x, model.encoder_norm);
}

ForwardTrace forward_trace(const Model& model, const TokenBatch& src, const TokenBatch& tgt,
                           bool keep_layer_outputs) {
  validate_tokens(model.config, tgt, "target");
  if (src.batch != tgt.batch) {
    throw InputError("source batch " + std::to_string(src.batch) + " != target batch " + std::to_string(tgt.batch));
  }
  const int heads = model.config.heads;
  Tensor memory = encode(model, src);
  Tensor self_mask = attention_mask(tgt, heads, tgt.length, true);
  Tensor cross_mask = attention_mask(src, heads, tgt.length, false);

  ForwardTrace trace;
  Tensor y = embed_with_positions(model, tgt, model.decoder_positions);
  for (const auto& layer : model.decoder) {
    Tensor a = norm(y, layer.ln_self);
    y = add(y, attention(a, a, layer.self_attn, self_mask, heads));
    y = add(y, attention(norm(y, layer.ln_cross), memory, layer.cross_attn, cross_mask, heads));
    y = add(y, feed_forward(norm(y, layer.ln_ffn), layer.ffn));
    if (keep_layer_outputs) trace.layer_outputs.push_back(y);
  }
  trace.decoder_output = norm(y, model.decoder_norm);
  trace.logits = model.embedding.project(trace.decoder_output);
  return trace;
}

Tensor forward(const Model& model, const TokenBatch& src, const TokenBatch& tgt) {
  return forward_trace(model, src, tgt).logits;
}

}  // namespace tcomp
