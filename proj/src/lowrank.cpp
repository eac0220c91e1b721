// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tcomp/lowrank.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tcomp/training.hpp"

namespace tcomp {

namespace {

// Column-major working copy.
struct Columns {
  std::int64_t rows = 0, cols = 0;
  std::vector<double> v;
  double* col(std::int64_t j) { return v.data() + j * rows; }
  const double* col(std::int64_t j) const { return v.data() + j * rows; }
};

double dot(const double* a, const double* b, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void rotate(double* x, double* y, std::int64_t n, double c, double s) {
  for (std::int64_t i = 0; i < n; ++i) {
    const double a = x[i], b = y[i];
    x[i] = c * a - s * b;
    y[i] = s * a + c * b;
  }
}

// Unit vector orthogonal to the first `count` columns of basis.
void complete_column(Columns& basis, std::int64_t count, double* out) {
  const auto m = basis.rows;
  for (std::int64_t k = 0; k < m; ++k) {
    std::fill(out, out + m, 0.0);
    out[k] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::int64_t j = 0; j < count; ++j) {
        const double p = dot(basis.col(j), out, m);
        for (std::int64_t i = 0; i < m; ++i) out[i] -= p * basis.col(j)[i];
      }
    }
    const double norm = std::sqrt(dot(out, out, m));
    if (norm > 0.5) {
      for (std::int64_t i = 0; i < m; ++i) out[i] /= norm;
      return;
    }
  }
  throw NumericalError("truncated_svd: could not complete an orthonormal basis");
}

}  // namespace

TruncatedSvd truncated_svd(const Tensor& matrix, int r, const SvdOptions& options) {
  if (matrix.rank() != 2) throw DimensionError("truncated_svd: expected a matrix, got " + shape_str(matrix.shape()));
  const auto m0 = matrix.dim(0), n0 = matrix.dim(1);
  if (r < 1 || r > std::min(m0, n0)) {
    throw SpecError(fmt::format("truncated_svd: rank {} outside [1, {}]", r, std::min(m0, n0)));
  }
  // Work on the tall orientation; swap the factors back at the end.
  const bool flipped = m0 < n0;
  Columns a;
  a.rows = flipped ? n0 : m0;
  a.cols = flipped ? m0 : n0;
  a.v.resize(static_cast<std::size_t>(a.rows * a.cols));
  const auto src = matrix.data();
  for (std::int64_t i = 0; i < m0; ++i) {
    for (std::int64_t j = 0; j < n0; ++j) {
      const double x = src[i * n0 + j];
      if (flipped) {
        a.col(i)[j] = x;
      } else {
        a.col(j)[i] = x;
      }
    }
  }
  const auto m = a.rows, n = a.cols;
  Columns v;
  v.rows = v.cols = n;
  v.v.assign(static_cast<std::size_t>(n * n), 0.0);
  for (std::int64_t j = 0; j < n; ++j) v.col(j)[j] = 1.0;

  const double total = dot(a.v.data(), a.v.data(), m * n);
  const double negligible = total * 1e-30;

  TruncatedSvd result;
  bool converged = false;
  for (int sweep = 1; sweep <= options.max_sweeps && !converged; ++sweep) {
    double off = 0.0;
    for (std::int64_t p = 0; p + 1 < n; ++p) {
      for (std::int64_t q = p + 1; q < n; ++q) {
        const double alpha = dot(a.col(p), a.col(p), m);
        const double beta = dot(a.col(q), a.col(q), m);
        if (alpha <= negligible || beta <= negligible) continue;
        const double gamma = dot(a.col(p), a.col(q), m);
        const double c = std::abs(gamma) / std::sqrt(alpha * beta);
        off = std::max(off, c);
        if (c < options.tolerance) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double cs = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = cs * t;
        rotate(a.col(p), a.col(q), m, cs, sn);
        rotate(v.col(p), v.col(q), n, cs, sn);
      }
    }
    result.sweeps = sweep;
    result.off_diagonal = off;
    converged = off < options.tolerance;
  }
  if (!converged) {
    throw NumericalError(fmt::format("truncated_svd: no convergence after {} sweeps, off-diagonal residual {:.3e}",
                                     options.max_sweeps, result.off_diagonal));
  }

  std::vector<double> sigma(static_cast<std::size_t>(n));
  for (std::int64_t j = 0; j < n; ++j) sigma[j] = std::sqrt(dot(a.col(j), a.col(j), m));
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return sigma[x] > sigma[y]; });

  // Left vectors for the kept triplets; zero singular values get an
  // arbitrary completion of the basis.
  Columns left;
  left.rows = m;
  left.cols = r;
  left.v.assign(static_cast<std::size_t>(m * r), 0.0);
  const double zero_cut = (sigma.empty() ? 0.0 : sigma[order[0]]) * 1e-12;
  for (std::int64_t k = 0; k < r; ++k) {
    const double s = sigma[order[k]];
    if (s > zero_cut && s > 0.0) {
      for (std::int64_t i = 0; i < m; ++i) left.col(k)[i] = a.col(order[k])[i] / s;
    } else {
      sigma[order[k]] = 0.0;
      complete_column(left, k, left.col(k));
    }
  }

  std::vector<float> uo(static_cast<std::size_t>(m0 * r)), vo(static_cast<std::size_t>(n0 * r));
  for (std::int64_t k = 0; k < r; ++k) {
    const double* lk = left.col(k);
    const double* rk = v.col(order[k]);
    // left spans the long side, v the short side
    for (std::int64_t i = 0; i < m; ++i) (flipped ? vo : uo)[i * r + k] = static_cast<float>(lk[i]);
    for (std::int64_t j = 0; j < n; ++j) (flipped ? uo : vo)[j * r + k] = static_cast<float>(rk[j]);
    result.s.push_back(static_cast<float>(sigma[order[k]]));
  }
  result.u = Tensor::from({m0, r}, std::move(uo));
  result.v = Tensor::from({n0, r}, std::move(vo));
  return result;
}

LowRankEmbedding decompose_embedding(const Tensor& table, int r) {
  if (table.rank() != 2) throw DimensionError("decompose_embedding: table must be 2-D, got " + shape_str(table.shape()));
  const auto rows = table.dim(0), h = table.dim(1);
  if (r < 1 || r >= std::min(rows, h)) {
    throw SpecError(fmt::format("rank must satisfy 1 <= r < min(V, h) = {}, got {}", std::min(rows, h), r));
  }
  const auto svd = truncated_svd(table, r);
  std::vector<float> e1(static_cast<std::size_t>(rows * r)), e2(static_cast<std::size_t>(r * h));
  const auto u = svd.u.data();
  const auto v = svd.v.data();
  for (std::int64_t i = 0; i < rows; ++i) {
    for (int k = 0; k < r; ++k) e1[i * r + k] = u[i * r + k] * svd.s[k];
  }
  for (int k = 0; k < r; ++k) {
    for (std::int64_t j = 0; j < h; ++j) e2[k * h + j] = v[j * r + k];
  }
  return {Tensor::from({rows, r}, std::move(e1), true), Tensor::from({r, h}, std::move(e2), true)};
}

Model decompose_model(const Model& model, int r) {
  if (model.embedding.factored()) throw SpecError("decompose: embedding is already factored");
  Model out = model.clone();
  out.embedding.factors = decompose_embedding(model.embedding.table, r);
  out.embedding.table = Tensor();
  out.config.rank = r;
  out.config.validate();
  return out;
}

Tensor feature_distance(const Tensor& y, const Tensor& y_hat) {
  if (y.shape() != y_hat.shape()) {
    throw DimensionError("feature_distance: shape mismatch " + shape_str(y.shape()) + " vs " +
                         shape_str(y_hat.shape()));
  }
  Tensor l1 = mean(abs(sub(y, y_hat)), -1);
  Tensor cos = cosine_similarity(y, y_hat);
  return sub(l1, log(sigmoid(cos)));
}

Stage2Terms stage2_loss(const Model& student, const Tensor& frozen_table, const Batch& batch) {
  if (!student.embedding.factored()) throw StructuralError("stage2_loss: student embedding is not factored");
  const auto& f = *student.embedding.factors;
  const Shape expected{f.e1.dim(0), f.e2.dim(1)};
  if (frozen_table.shape() != expected) {
    throw StructuralError("stage2_loss: frozen table " + shape_str(frozen_table.shape()) +
                          " does not match factors " + shape_str(expected));
  }
  const Tensor table = frozen_table.detach();

  Stage2Terms terms;
  const auto trace = forward_trace(student, batch.src, batch.tgt_in);
  terms.ce = cross_entropy(trace.logits, batch.tgt_out);

  std::vector<int> ids, rows;
  for (std::size_t i = 0; i < batch.tgt_in.ids.size(); ++i) {
    if (batch.tgt_in.ids[i] == kPad) continue;
    ids.push_back(batch.tgt_in.ids[i]);
    rows.push_back(static_cast<int>(i));
  }
  const auto n = static_cast<std::int64_t>(ids.size());
  Tensor in_ref = embedding(table, ids, {n});
  Tensor in_approx = matmul(embedding(f.e1, ids, {n}), f.e2);
  terms.input_distance = mean_all(feature_distance(in_ref, in_approx));

  const auto h = trace.decoder_output.dim(-1);
  Tensor o_flat = reshape(trace.decoder_output.detach(), {trace.decoder_output.numel() / h, h});
  Tensor o = embedding(o_flat, rows, {n});
  Tensor out_ref = matmul_nt(o, table);
  Tensor out_approx = matmul_nt(matmul_nt(o, f.e2), f.e1);
  terms.output_distance = mean_all(feature_distance(out_ref, out_approx));

  terms.total = add(add(terms.ce, terms.input_distance), terms.output_distance);
  return terms;
}

}  // namespace tcomp
