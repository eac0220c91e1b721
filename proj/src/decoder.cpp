// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Incremental decoding path. Mirrors forward() arithmetic on raw buffers
// with a key/value cache so each step costs one token's worth of work.

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>

#include "tcomp/model.hpp"

namespace tcomp {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using ConstRowVec = Eigen::Map<const Eigen::RowVectorXf>;

ConstMatMap view(const Tensor& t) { return ConstMatMap(t.data().data(), t.dim(0), t.dim(1)); }

// out[rows, out] = x[rows, in] * W + b
void affine(const float* x, int rows, const Linear& l, FloatBuffer& out) {
  const auto in = l.weight.dim(0), n = l.weight.dim(1);
  out.resize(static_cast<std::size_t>(rows) * n);
  MatMap y(out.data(), rows, n);
  y.noalias() = ConstMatMap(x, rows, in) * view(l.weight);
  y.rowwise() += ConstRowVec(l.bias.data().data(), n);
}

void layer_norm_rows(const float* x, int rows, int h, const LayerNormParams& p, FloatBuffer& out) {
  out.resize(static_cast<std::size_t>(rows) * h);
  const auto g = p.gain.data();
  const auto b = p.bias.data();
  for (int r = 0; r < rows; ++r) {
    const float* row = x + static_cast<std::size_t>(r) * h;
    double mu = 0.0;
    for (int j = 0; j < h; ++j) mu += row[j];
    mu /= h;
    double var = 0.0;
    for (int j = 0; j < h; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= h;
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < h; ++j) {
      out[static_cast<std::size_t>(r) * h + j] = static_cast<float>((row[j] - mu) * is) * g[j] + b[j];
    }
  }
}

// Single-query attention for one sequence and head over `count` keys.
void attend(const float* q, const float* keys, const float* values, int count, int stride, int dh,
            const std::vector<char>* valid, float* out, FloatBuffer& scratch) {
  using Strided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  scratch.resize(count);
  Eigen::Map<Eigen::VectorXf> s(scratch.data(), count);
  const Strided k(keys, count, dh, Eigen::OuterStride<>(stride));
  const Strided v(values, count, dh, Eigen::OuterStride<>(stride));
  s.noalias() = k * Eigen::Map<const Eigen::VectorXf>(q, dh);
  s *= 1.0f / std::sqrt(static_cast<float>(dh));
  if (valid) {
    for (int j = 0; j < count; ++j)
      if (!(*valid)[j]) s[j] = -INFINITY;
  }
  s = (s.array() - s.maxCoeff()).exp();
  s /= s.sum();
  Eigen::Map<Eigen::RowVectorXf>(out, dh).noalias() = s.transpose() * v;
}

// First index of the largest entry, optionally skipping EOS.
int argmax(const float* row, int n, bool skip_eos) {
  using Vec = Eigen::Map<const Eigen::ArrayXf>;
  float m = -INFINITY;
  for (int begin = 0; begin < n;) {
    const int end = skip_eos && begin <= kEos ? kEos : n;
    if (end > begin) m = std::max(m, Vec(row + begin, end - begin).maxCoeff());
    begin = end == kEos ? kEos + 1 : end;
  }
  for (int t = 0; t < n; ++t)
    if (row[t] == m && !(skip_eos && t == kEos)) return t;
  // NaN logits: fall back to the first admissible comparison winner.
  int best = -1;
  for (int t = 0; t < n; ++t) {
    if (skip_eos && t == kEos) continue;
    if (best < 0 || row[t] > row[best]) best = t;
  }
  return best;
}

}  // namespace

CachedDecoder::CachedDecoder(const Model& model, const TokenBatch& src) : model_(model) {
  const auto& c = model.config;
  batch_ = src.batch;
  src_len_ = src.length;
  src_valid_.resize(src.ids.size());
  for (std::size_t i = 0; i < src.ids.size(); ++i) src_valid_[i] = src.ids[i] != kPad;

  FloatBuffer memory;
  {
    NoGradGuard no_grad;
    Tensor enc = encode(model, src);
    memory.assign(enc.data().begin(), enc.data().end());
  }
  const int rows = batch_ * src_len_;
  caches_.resize(model.decoder.size());
  for (std::size_t l = 0; l < model.decoder.size(); ++l) {
    auto& cache = caches_[l];
    affine(memory.data(), rows, model.decoder[l].cross_attn.k, cache.cross_k);
    affine(memory.data(), rows, model.decoder[l].cross_attn.v, cache.cross_v);
    cache.self_k.assign(static_cast<std::size_t>(batch_) * c.max_positions * c.hidden, 0.0f);
    cache.self_v.assign(cache.self_k.size(), 0.0f);
  }
}

std::span<const float> CachedDecoder::step(std::span<const int> tokens) {
  const auto& c = model_.config;
  const int h = c.hidden, heads = c.heads, dh = c.head_dim(), V = c.vocab_size;
  if (static_cast<int>(tokens.size()) != batch_) throw InputError("step() needs one token per sequence");
  if (position_ >= c.max_positions) {
    throw InputError("decode position " + std::to_string(position_) + " exceeds max_positions " +
                     std::to_string(c.max_positions));
  }
  for (int t : tokens) {
    if (t < 0 || t >= V) throw InputError("token id " + std::to_string(t) + " outside vocabulary");
  }

  FloatBuffer x(static_cast<std::size_t>(batch_) * h);
  const auto pos = model_.decoder_positions.data().subspan(static_cast<std::size_t>(position_) * h, h);
  const auto& emb = model_.embedding;
  for (int b = 0; b < batch_; ++b) {
    float* xb = x.data() + static_cast<std::size_t>(b) * h;
    if (emb.factored()) {
      const int r = emb.factors->rank();
      Eigen::Map<Eigen::RowVectorXf>(xb, h).noalias() =
          ConstRowVec(emb.factors->e1.data().data() + static_cast<std::size_t>(tokens[b]) * r, r) *
          view(emb.factors->e2);
    } else {
      std::copy_n(emb.table.data().data() + static_cast<std::size_t>(tokens[b]) * h, h, xb);
    }
    for (int j = 0; j < h; ++j) xb[j] += pos[j];
  }

  FloatBuffer a, q, k, v, ctx(x.size()), proj, scratch;
  std::vector<char> valid(src_len_);
  for (std::size_t l = 0; l < model_.decoder.size(); ++l) {
    const auto& layer = model_.decoder[l];
    auto& cache = caches_[l];

    layer_norm_rows(x.data(), batch_, h, layer.ln_self, a);
    affine(a.data(), batch_, layer.self_attn.q, q);
    affine(a.data(), batch_, layer.self_attn.k, k);
    affine(a.data(), batch_, layer.self_attn.v, v);
    for (int b = 0; b < batch_; ++b) {
      const std::size_t slot = (static_cast<std::size_t>(b) * c.max_positions + position_) * h;
      std::copy_n(k.data() + static_cast<std::size_t>(b) * h, h, cache.self_k.data() + slot);
      std::copy_n(v.data() + static_cast<std::size_t>(b) * h, h, cache.self_v.data() + slot);
      for (int hd = 0; hd < heads; ++hd) {
        const std::size_t base = static_cast<std::size_t>(b) * c.max_positions * h + hd * dh;
        attend(q.data() + static_cast<std::size_t>(b) * h + hd * dh, cache.self_k.data() + base,
               cache.self_v.data() + base, position_ + 1, h, dh, nullptr,
               ctx.data() + static_cast<std::size_t>(b) * h + hd * dh, scratch);
      }
    }
    affine(ctx.data(), batch_, layer.self_attn.o, proj);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += proj[i];

    layer_norm_rows(x.data(), batch_, h, layer.ln_cross, a);
    affine(a.data(), batch_, layer.cross_attn.q, q);
    for (int b = 0; b < batch_; ++b) {
      for (int s = 0; s < src_len_; ++s) valid[s] = static_cast<char>(src_valid_[b * src_len_ + s]);
      for (int hd = 0; hd < heads; ++hd) {
        const std::size_t base = static_cast<std::size_t>(b) * src_len_ * h + hd * dh;
        attend(q.data() + static_cast<std::size_t>(b) * h + hd * dh, cache.cross_k.data() + base,
               cache.cross_v.data() + base, src_len_, h, dh, &valid,
               ctx.data() + static_cast<std::size_t>(b) * h + hd * dh, scratch);
      }
    }
    affine(ctx.data(), batch_, layer.cross_attn.o, proj);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += proj[i];

    layer_norm_rows(x.data(), batch_, h, layer.ln_ffn, a);
    affine(a.data(), batch_, layer.ffn.up, q);
    {
      auto u = Eigen::Map<Eigen::ArrayXf>(q.data(), static_cast<Eigen::Index>(q.size()));
      u = 0.5f * u * (1.0f + (u * 0.70710678118654752f).erf());
    }
    affine(q.data(), batch_, layer.ffn.down, proj);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += proj[i];
  }

  layer_norm_rows(x.data(), batch_, h, model_.decoder_norm, a);
  logits_.resize(static_cast<std::size_t>(batch_) * V);
  MatMap out(logits_.data(), batch_, V);
  ConstMatMap o(a.data(), batch_, h);
  if (emb.factored()) {
    RowMat low = o * view(emb.factors->e2).transpose();
    out.noalias() = low * view(emb.factors->e1).transpose();
  } else {
    out.noalias() = o * view(emb.table).transpose();
  }
  ++position_;
  return logits_;
}

std::vector<std::vector<int>> greedy_decode(const Model& model, const TokenBatch& src, const DecodeOptions& options) {
  if (options.max_new_tokens < 1) throw SpecError("max_new_tokens must be at least 1");
  if (options.max_new_tokens > model.config.max_positions) {
    throw InputError("max_new_tokens " + std::to_string(options.max_new_tokens) + " exceeds max_positions " +
                     std::to_string(model.config.max_positions));
  }
  CachedDecoder decoder(model, src);
  const int V = model.config.vocab_size;
  std::vector<std::vector<int>> out(src.batch);
  std::vector<int> feed(src.batch, kBos);
  std::vector<char> done(src.batch, 0);
  int remaining = src.batch;
  for (int step = 0; step < options.max_new_tokens && remaining > 0; ++step) {
    const auto logits = decoder.step(feed);
    for (int b = 0; b < src.batch; ++b) {
      if (done[b]) continue;
      const int best = argmax(logits.data() + static_cast<std::size_t>(b) * V, V, options.suppress_eos);
      out[b].push_back(best);
      feed[b] = best;
      if (best == kEos) {
        done[b] = 1;
        --remaining;
      }
    }
  }
  return out;
}

}  // namespace tcomp
