// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient cases shared by the unit tests and the
// acceptance runner. Every expected value comes from the f64 oracle.

#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "oracle.hpp"
#include "tcomp/lowrank.hpp"
#include "tcomp/model.hpp"
#include "tcomp/surgery.hpp"
#include "tcomp/tensor.hpp"
#include "tcomp/training.hpp"
#include "test_util.hpp"

namespace grad_cases {

using oracle::Vec;
using tcomp::Tensor;
using testing_util::random_nonzero;
using testing_util::random_tensor;

struct OpCase {
  std::string name;
  std::function<std::vector<Tensor>()> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> op;
  std::function<Vec(const std::vector<Vec>&)> ref;
};

inline void PrintTo(const OpCase& c, std::ostream* os) { *os << c.name; }

inline testing_util::GradReport run(const OpCase& c) { return testing_util::check_op(c.inputs(), c.op, c.ref); }

inline Vec elementwise(const Vec& x, const std::function<double(double)>& f) {
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}

inline Vec zip(const Vec& x, const Vec& y, const std::function<double(double, double)>& f) {
  Vec z(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) z[i] = f(x[i], y[i]);
  return z;
}

inline Vec batched_matmul(const Vec& a, const Vec& b, int batch, int m, int k, int n, bool transpose_b) {
  Vec y(static_cast<std::size_t>(batch) * m * n, 0.0);
  for (int p = 0; p < batch; ++p)
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        for (int q = 0; q < k; ++q) {
          const double bv = transpose_b ? b[p * n * k + j * k + q] : b[p * k * n + q * n + j];
          y[p * m * n + i * n + j] += a[p * m * k + i * k + q] * bv;
        }
  return y;
}

// One case per differentiable tensor op.
inline std::vector<OpCase> op_cases() {
  using namespace tcomp;
  std::vector<OpCase> c;
  auto in = [](std::vector<std::pair<Shape, std::uint64_t>> specs) {
    return [specs] {
      std::vector<Tensor> out;
      for (const auto& [shape, seed] : specs) out.push_back(random_tensor(shape, seed));
      return out;
    };
  };
  c.push_back({"matmul", in({{{3, 4}, 1}, {{4, 2}, 2}}), [](auto& x) { return matmul(x[0], x[1]); },
               [](auto& x) { return oracle::matmul(x[0], x[1], 3, 4, 2); }});
  c.push_back({"matmul_batched_left", in({{{2, 3, 4}, 3}, {{4, 5}, 4}}), [](auto& x) { return matmul(x[0], x[1]); },
               [](auto& x) { return oracle::matmul(x[0], x[1], 6, 4, 5); }});
  c.push_back({"matmul_nt", in({{{3, 4}, 5}, {{6, 4}, 6}}), [](auto& x) { return matmul_nt(x[0], x[1]); },
               [](auto& x) { return batched_matmul(x[0], x[1], 1, 3, 4, 6, true); }});
  c.push_back({"bmm", in({{{2, 3, 4}, 7}, {{2, 4, 5}, 8}}), [](auto& x) { return bmm(x[0], x[1]); },
               [](auto& x) { return batched_matmul(x[0], x[1], 2, 3, 4, 5, false); }});
  c.push_back({"bmm_transposed", in({{{2, 3, 4}, 9}, {{2, 5, 4}, 10}}), [](auto& x) { return bmm(x[0], x[1], true); },
               [](auto& x) { return batched_matmul(x[0], x[1], 2, 3, 4, 5, true); }});
  c.push_back({"linear", in({{{2, 3, 4}, 11}, {{4, 3}, 12}, {{3}, 13}}),
               [](auto& x) { return linear(x[0], x[1], x[2]); },
               [](auto& x) {
                 auto y = oracle::matmul(x[0], x[1], 6, 4, 3);
                 for (int i = 0; i < 18; ++i) y[i] += x[2][i % 3];
                 return y;
               }});
  c.push_back({"add", in({{{3, 5}, 14}, {{3, 5}, 15}}), [](auto& x) { return add(x[0], x[1]); },
               [](auto& x) { return zip(x[0], x[1], std::plus<>()); }});
  c.push_back({"sub", in({{{3, 5}, 14}, {{3, 5}, 15}}), [](auto& x) { return sub(x[0], x[1]); },
               [](auto& x) { return zip(x[0], x[1], std::minus<>()); }});
  c.push_back({"mul", in({{{3, 5}, 14}, {{3, 5}, 15}}), [](auto& x) { return mul(x[0], x[1]); },
               [](auto& x) { return zip(x[0], x[1], std::multiplies<>()); }});
  c.push_back({"mul_shared_input", in({{{3, 5}, 14}}), [](auto& x) { return mul(x[0], x[0]); },
               [](auto& x) { return zip(x[0], x[0], std::multiplies<>()); }});
  c.push_back({"add_bias", in({{{4, 3}, 16}, {{3}, 17}}), [](auto& x) { return add_bias(x[0], x[1]); },
               [](auto& x) {
                 Vec y = x[0];
                 for (int i = 0; i < 12; ++i) y[i] += x[1][i % 3];
                 return y;
               }});
  c.push_back({"scale", in({{{5}, 18}}), [](auto& x) { return scale(x[0], -1.7f); },
               [](auto& x) { return elementwise(x[0], [](double v) { return v * static_cast<double>(-1.7f); }); }});
  c.push_back({"scale_by", in({{{2, 3}, 19}, {{1}, 20}}), [](auto& x) { return scale_by(x[0], x[1]); },
               [](auto& x) { return elementwise(x[0], [s = x[1][0]](double v) { return v * s; }); }});
  c.push_back({"add_scalar", in({{{5}, 21}}), [](auto& x) { return add_scalar(x[0], 0.3f); },
               [](auto& x) { return elementwise(x[0], [](double v) { return v + static_cast<double>(0.3f); }); }});
  c.push_back({"abs", [] { return std::vector<Tensor>{random_nonzero({4, 3}, 22)}; },
               [](auto& x) { return abs(x[0]); },
               [](auto& x) { return elementwise(x[0], [](double v) { return std::abs(v); }); }});
  c.push_back({"exp", in({{{4, 3}, 23}}), [](auto& x) { return exp(x[0]); },
               [](auto& x) { return elementwise(x[0], [](double v) { return std::exp(v); }); }});
  c.push_back({"log", [] { return std::vector<Tensor>{random_tensor({4, 3}, 24, true, 0.2f, 2.0f)}; },
               [](auto& x) { return log(x[0]); },
               [](auto& x) { return elementwise(x[0], [](double v) { return std::log(v); }); }});
  c.push_back({"sigmoid", in({{{4, 3}, 25}}), [](auto& x) { return sigmoid(x[0]); },
               [](auto& x) { return elementwise(x[0], oracle::sigmoid); }});
  c.push_back({"softplus", in({{{4, 3}, 26}}), [](auto& x) { return softplus(x[0]); },
               [](auto& x) { return elementwise(x[0], oracle::softplus); }});
  c.push_back({"reciprocal", [] { return std::vector<Tensor>{random_tensor({4, 3}, 27, true, 0.5f, 2.0f)}; },
               [](auto& x) { return reciprocal(x[0]); },
               [](auto& x) { return elementwise(x[0], [](double v) { return 1.0 / v; }); }});
  c.push_back({"gelu", in({{{4, 3}, 28}}), [](auto& x) { return gelu(x[0]); },
               [](auto& x) { return elementwise(x[0], oracle::gelu); }});
  c.push_back({"reshape", in({{{2, 6}, 29}}),
               [](auto& x) { return mul(reshape(x[0], {3, 4}), reshape(x[0], {3, 4})); },
               [](auto& x) { return elementwise(x[0], [](double v) { return v * v; }); }});
  c.push_back({"transpose", in({{{2, 3, 4}, 30}}), [](auto& x) { return transpose(x[0], 0, 2); },
               [](auto& x) {
                 Vec y(24);
                 for (int a = 0; a < 2; ++a)
                   for (int b = 0; b < 3; ++b)
                     for (int d = 0; d < 4; ++d) y[d * 6 + b * 2 + a] = x[0][a * 12 + b * 4 + d];
                 return y;
               }});
  c.push_back({"concat", in({{{2, 3}, 31}, {{2, 2}, 32}}), [](auto& x) { return concat({x[0], x[1]}, 1); },
               [](auto& x) {
                 Vec y;
                 for (int r = 0; r < 2; ++r) {
                   y.insert(y.end(), x[0].begin() + r * 3, x[0].begin() + r * 3 + 3);
                   y.insert(y.end(), x[1].begin() + r * 2, x[1].begin() + r * 2 + 2);
                 }
                 return y;
               }});
  c.push_back({"embedding", in({{{5, 2}, 33}}),
               [](auto& x) {
                 const std::vector<int> ids{3, 0, 3, 1};
                 return embedding(x[0], ids, {2, 2});
               },
               [](auto& x) {
                 Vec y;
                 for (int id : {3, 0, 3, 1}) y.insert(y.end(), x[0].begin() + id * 2, x[0].begin() + id * 2 + 2);
                 return y;
               }});
  c.push_back({"take_along_last", in({{{3, 5}, 34}}),
               [](auto& x) {
                 const std::vector<int> pick{2, 0, 4};
                 return take_along_last(x[0], pick);
               },
               [](auto& x) { return Vec{x[0][2], x[0][5], x[0][14]}; }});
  c.push_back({"sum", in({{{2, 3, 4}, 35}}), [](auto& x) { return sum(x[0], 1); },
               [](auto& x) {
                 Vec y(8, 0.0);
                 for (int a = 0; a < 2; ++a)
                   for (int b = 0; b < 3; ++b)
                     for (int d = 0; d < 4; ++d) y[a * 4 + d] += x[0][a * 12 + b * 4 + d];
                 return y;
               }});
  c.push_back({"mean", in({{{2, 3, 4}, 36}}), [](auto& x) { return mean(x[0], -1); },
               [](auto& x) {
                 Vec y(6, 0.0);
                 for (int r = 0; r < 6; ++r)
                   for (int d = 0; d < 4; ++d) y[r] += x[0][r * 4 + d] / 4.0;
                 return y;
               }});
  c.push_back({"sum_all", in({{{3, 4}, 37}}), [](auto& x) { return sum_all(mul(x[0], x[0])); },
               [](auto& x) {
                 double s = 0;
                 for (double v : x[0]) s += v * v;
                 return Vec{s};
               }});
  c.push_back({"mean_all", in({{{3, 4}, 38}}), [](auto& x) { return mean_all(x[0]); },
               [](auto& x) {
                 double s = 0;
                 for (double v : x[0]) s += v;
                 return Vec{s / 12};
               }});
  c.push_back({"softmax", in({{{3, 6}, 39}}), [](auto& x) { return softmax(x[0]); },
               [](auto& x) { return oracle::softmax_rows(x[0], 6); }});
  c.push_back({"log_softmax", in({{{3, 6}, 40}}), [](auto& x) { return log_softmax(x[0]); },
               [](auto& x) { return oracle::log_softmax_rows(x[0], 6); }});
  c.push_back({"softmax_axis0", in({{{4, 3}, 41}}), [](auto& x) { return softmax(x[0], 0); },
               [](auto& x) {
                 Vec t(12), y(12);
                 for (int i = 0; i < 4; ++i)
                   for (int j = 0; j < 3; ++j) t[j * 4 + i] = x[0][i * 3 + j];
                 const auto s = oracle::softmax_rows(t, 4);
                 for (int i = 0; i < 4; ++i)
                   for (int j = 0; j < 3; ++j) y[i * 3 + j] = s[j * 4 + i];
                 return y;
               }});
  c.push_back({"layer_norm", in({{{4, 5}, 42}, {{5}, 43}, {{5}, 44}}),
               [](auto& x) { return layer_norm(x[0], x[1], x[2]); },
               [](auto& x) { return oracle::layer_norm_rows(x[0], x[1], x[2], 5, static_cast<double>(kLayerNormEps)); }});
  c.push_back({"cosine_similarity", in({{{3, 4}, 45}, {{3, 4}, 46}}),
               [](auto& x) { return cosine_similarity(x[0], x[1]); },
               [](auto& x) {
                 Vec y(3);
                 for (int r = 0; r < 3; ++r) y[r] = oracle::cosine(x[0].data() + r * 4, x[1].data() + r * 4, 4);
                 return y;
               }});
  c.push_back({"feature_distance", [] { return std::vector<Tensor>{random_tensor({4, 6}, 17), random_nonzero({4, 6}, 18)}; },
               [](auto& x) { return feature_distance(x[0], x[1]); },
               [](auto& x) {
                 Vec y(4);
                 for (int i = 0; i < 4; ++i) y[i] = oracle::feature_distance(x[0].data() + i * 6, x[1].data() + i * 6, 6);
                 return y;
               }});
  c.push_back({"attention_block", in({{{1, 3, 4}, 47}, {{1, 5, 4}, 48}, {{1, 5, 2}, 49}}),
               [](auto& x) { return bmm(softmax(bmm(x[0], x[1], true)), x[2]); },
               [](auto& x) {
                 const auto s = batched_matmul(x[0], x[1], 1, 3, 4, 5, true);
                 return oracle::matmul(oracle::softmax_rows(s, 5), x[2], 3, 5, 2);
               }});
  return c;
}

// ---------------------------------------------------------------- loss probes

struct Probe {
  std::string name;
  double analytic = 0;
  double numeric = 0;
  double relative_error() const { return std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-12); }
};

inline tcomp::ModelConfig tiny_config() {
  tcomp::ModelConfig c;
  c.vocab_size = 40;
  c.hidden = 16;
  c.encoder_layers = 1;
  c.decoder_layers = 2;
  c.heads = 2;
  c.ffn_dim = 32;
  c.max_positions = 40;
  return c;
}

inline void perturb(const tcomp::Model& m, std::uint64_t seed, float sd) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, sd);
  for (const auto& [name, t] : m.named_parameters()) {
    Tensor h = t;
    for (auto& v : h.mutable_data()) v += d(rng);
  }
}

inline tcomp::Batch tiny_batch() {
  std::vector<tcomp::Example> ex{{{5, 9, 12, 7}, {7, 12, 9, 5}}, {{30, 4}, {4, 30}}, {{3, 3, 8}, {8, 3, 3}}};
  return tcomp::make_batch(ex);
}

// Random parameter entries with a clearly non-zero tape gradient; `prefer`
// biases the draw toward names with that prefix.
template <typename Loss>
std::vector<Probe> probe_parameters(const tcomp::Model& model, oracle::RefModel& ref, const Loss& loss, int count,
                                    std::uint64_t seed, const std::string& prefer = "", int preferred = 0) {
  std::mt19937_64 rng(seed);
  const auto params = model.named_parameters();
  std::vector<std::size_t> favoured;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!prefer.empty() && params[i].first.rfind(prefer, 0) == 0) favoured.push_back(i);
  std::vector<Probe> out;
  int got_preferred = 0;
  for (int attempt = 0; attempt < 5000 && (static_cast<int>(out.size()) < count || got_preferred < preferred);
       ++attempt) {
    const bool pick_favoured = !favoured.empty() && got_preferred < preferred && attempt % 2 == 0;
    const auto& [name, t] = params[pick_favoured ? favoured[rng() % favoured.size()] : rng() % params.size()];
    const std::size_t i = rng() % static_cast<std::size_t>(t.numel());
    if (!t.has_grad() || std::abs(t.grad()[i]) < 1e-3) continue;
    const double fd = oracle::central_difference(ref, name, i, 1e-4, loss);
    out.push_back({name + "[" + std::to_string(i) + "]", t.grad()[i], fd});
    got_preferred += !prefer.empty() && name.rfind(prefer, 0) == 0;
  }
  return out;
}

// lambda * CE + gamma * KD for a merged student, including d/d rho.
inline std::vector<Probe> stage1_probes(int count, std::uint64_t seed) {
  using namespace tcomp;
  Model teacher = Model::init(tiny_config(), seed);
  perturb(teacher, seed + 1, 0.3f);
  Model student = merge_decoder(teacher, MergeSpec::adjacent(2));
  perturb(student, seed + 2, 0.1f);
  const Batch b = tiny_batch();
  const float rho = 0.9f;
  Tensor rho_t = Tensor::scalar(rho, true);
  const LossWeights w{0.6f, 1.4f};
  stage1_loss(student, teacher, b, w, rho_t).total.backward();

  const Vec teacher_logits = oracle::RefModel(teacher).forward(b.src, b.tgt_in);
  const int v = tiny_config().vocab_size;
  auto loss_at = [&](const oracle::RefModel& m, double r) {
    const Vec z = m.forward(b.src, b.tgt_in);
    return w.lambda * oracle::cross_entropy(z, b.tgt_out, v) +
           w.gamma * oracle::kd(z, teacher_logits, b.tgt_out, v, oracle::softplus(r));
  };
  oracle::RefModel ref(student);
  auto probes = probe_parameters(student, ref, [&](const oracle::RefModel& m) { return loss_at(m, rho); }, count,
                                 seed + 3);
  const double h = 1e-4;
  probes.push_back({"rho", rho_t.grad()[0], (loss_at(ref, rho + h) - loss_at(ref, rho - h)) / (2 * h)});
  return probes;
}

// CE plus both feature distances; the decoder output in the output-side
// distance is a constant.
inline std::vector<Probe> stage2_probes(int count, int factor_probes, std::uint64_t seed) {
  using namespace tcomp;
  Model dense = Model::init(tiny_config(), seed);
  perturb(dense, seed + 1, 0.1f);
  const Tensor frozen = dense.embedding.table.detach();
  Model student = decompose_model(dense, 6);
  std::mt19937_64 rng(seed + 2);
  std::normal_distribution<float> d(0.0f, 0.2f);
  for (Tensor t : {student.embedding.factors->e1, student.embedding.factors->e2})
    for (auto& v : t.mutable_data()) v += d(rng);
  const Batch b = tiny_batch();
  stage2_loss(student, frozen, b).total.backward();

  const int v = tiny_config().vocab_size, h = tiny_config().hidden;
  const Vec e = oracle::to_vec(frozen.data());
  oracle::RefModel ref(student);
  std::vector<Vec> o_fixed;
  for (int r = 0; r < b.src.batch; ++r)
    o_fixed.push_back(ref.decode_row(oracle::RefModel::row(b.src, r), oracle::RefModel::row(b.tgt_in, r)));
  auto loss = [&](const oracle::RefModel& m) {
    const double ce = oracle::cross_entropy(m.forward(b.src, b.tgt_in), b.tgt_out, v);
    const Vec approx = m.table();
    double din = 0, dout = 0;
    int n = 0;
    for (int r = 0; r < b.tgt_in.batch; ++r)
      for (int t = 0; t < b.tgt_in.length; ++t) {
        const int id = b.tgt_in.at(r, t);
        if (id == kPad) continue;
        din += oracle::feature_distance(e.data() + id * h, approx.data() + id * h, h);
        const double* o = o_fixed[r].data() + t * h;
        Vec yr(v, 0.0), ya(v, 0.0);
        for (int k = 0; k < v; ++k)
          for (int j = 0; j < h; ++j) {
            yr[k] += o[j] * e[k * h + j];
            ya[k] += o[j] * approx[k * h + j];
          }
        dout += oracle::feature_distance(yr.data(), ya.data(), v);
        ++n;
      }
    return ce + din / n + dout / n;
  };
  return probe_parameters(student, ref, loss, count, seed + 3, "embed", factor_probes);
}

// d kd_loss / d rho at several temperatures, plus the student-logit
// gradient norm-wise at each.
inline std::vector<Probe> kd_rho_probes(std::vector<testing_util::GradReport>* logit_reports = nullptr) {
  using namespace tcomp;
  const auto targets = TokenBatch::from_rows({{4, 7, 1}, {9, 1}});
  const Tensor teacher = random_tensor({2, 3, 11}, 6, false);
  const auto valid = valid_positions(targets);
  const Vec t64 = oracle::to_vec(teacher.data());
  std::vector<Probe> out;
  std::uint64_t seed = 70;
  for (float rho : {-0.5f, 0.4f, 1.3f, 2.5f, 4.0f}) {
    const Tensor student = random_tensor({2, 3, 11}, seed++);
    Tensor r = Tensor::scalar(rho, true);
    kd_loss(student, teacher, r, valid).backward();
    const Vec s64 = oracle::to_vec(student.data());
    const double h = 1e-4;
    const double fd = (oracle::kd(s64, t64, targets, 11, oracle::softplus(rho + h)) -
                       oracle::kd(s64, t64, targets, 11, oracle::softplus(rho - h))) /
                      (2 * h);
    out.push_back({"rho=" + std::to_string(rho), r.grad()[0], fd});
    if (logit_reports) {
      logit_reports->push_back(testing_util::check_op(
          {student.detach().clone(), Tensor::scalar(rho, true)},
          [&](auto& x) { return kd_loss(x[0], teacher, x[1], valid); },
          [&](auto& x) { return Vec{oracle::kd(x[0], t64, targets, 11, oracle::softplus(x[1][0]))}; }));
    }
  }
  return out;
}

}  // namespace grad_cases
