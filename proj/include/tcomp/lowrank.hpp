// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Low-rank factoring of the tied embedding and the feature-distillation
// objective used to retrain the factors.

#pragma once

#include <vector>

#include "tcomp/data.hpp"
#include "tcomp/model.hpp"

namespace tcomp {

struct SvdOptions {
  double tolerance = 1e-8;  // max normalized off-diagonal inner product
  int max_sweeps = 60;
};

/// Leading r singular triplets: m = u * diag(s) * v^T restricted to rank r.
struct TruncatedSvd {
  Tensor u;               // [m, r], orthonormal columns
  std::vector<float> s;   // r values, non-increasing
  Tensor v;               // [n, r], orthonormal columns
  int sweeps = 0;
  double off_diagonal = 0.0;
};

/// One-sided Jacobi in double precision. Throws NumericalError when the
/// sweep cap is reached, reporting the remaining off-diagonal mass.
TruncatedSvd truncated_svd(const Tensor& matrix, int r, const SvdOptions& options = {});

/// e1 = U_r diag(S_r), e2 = V_r^T. Requires 1 <= r < min(V, h).
LowRankEmbedding decompose_embedding(const Tensor& table, int r);

/// Copy of a dense-embedding model with the table replaced by factors.
Model decompose_model(const Model& model, int r);

/// Per-vector distance along the last axis:
///   mean|y - y_hat| - log sigmoid(cos(y, y_hat)).
/// A zero-norm operand gives cos = 0 and bumps the degeneracy counter.
Tensor feature_distance(const Tensor& y, const Tensor& y_hat);

/// ln(1 + e^-1), the value of feature_distance(y, y).
inline constexpr double kFeatureDistanceFloor = 0.31326168751822286;

struct Stage2Terms {
  Tensor total;
  Tensor ce;
  Tensor input_distance;   // mean d(E[x], e1[x] e2)
  Tensor output_distance;  // mean d(o E^T, (o e2^T) e1^T)
};

/// CE plus the two distillation distances against a frozen dense table.
/// The decoder output o enters the output-side distance as a constant, so
/// that term trains the factors only; CE reaches every parameter.
Stage2Terms stage2_loss(const Model& student, const Tensor& frozen_table, const Batch& batch);

}  // namespace tcomp
