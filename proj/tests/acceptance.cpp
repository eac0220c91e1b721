// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance runner. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.

#include <fmt/core.h>

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "container_util.hpp"
#include "grad_cases.hpp"
#include "oracle.hpp"
#include "tcomp/bench.hpp"
#include "tcomp/checkpoint.hpp"
#include "tcomp/data.hpp"
#include "tcomp/error.hpp"
#include "tcomp/lowrank.hpp"
#include "tcomp/model.hpp"
#include "tcomp/pipeline.hpp"
#include "tcomp/search.hpp"
#include "tcomp/surgery.hpp"
#include "tcomp/training.hpp"

using namespace tcomp;

namespace {

using clk = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void run(int id, const std::string& name, const std::function<Outcome()>& body) {
  const auto start = clk::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(clk::now() - start).count();
  failures += !o.pass;
  fmt::print("{} {:2d} {} ({:.1f}s) {}\n", o.pass ? "PASS" : "FAIL", id, name, secs, o.detail);
  std::fflush(stdout);
}

void progress(const std::string& msg) {
  fmt::print(stderr, "  .. {}\n", msg);
  std::fflush(stderr);
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// ---------------------------------------------------------------- 1

Outcome param_counts() {
  const auto r = count_only_report(ModelConfig::whisper_base_like(), 96);
  const double published[] = {73e6, 60e6, 38e6};
  Outcome o{true, ""};
  for (int i = 0; i < 3; ++i) {
    const double p = static_cast<double>(r.rows[i].params);
    const double dev = std::abs(p - published[i]) / published[i];
    o.pass &= dev <= 0.03;
    o.detail += fmt::format("{}={} ({:+.2f}%) ", r.rows[i].name, r.rows[i].params, 100 * (p - published[i]) / published[i]);
  }
  const double reduction = 100.0 * (1.0 - static_cast<double>(r.rows[1].params) / r.rows[0].params);
  o.pass &= std::abs(reduction - 18.0) <= 2.0;
  o.detail += fmt::format("stage-1 reduction {:.2f}%", reduction);
  return o;
}

// ---------------------------------------------------------------- 2

DecoderLayerParams constant_layer(const DecoderLayerParams& like, float value) {
  DecoderLayerParams out = like.clone();
  for (auto& [name, t] : out.named_tensors()) {
    Tensor h = t;
    std::fill(h.mutable_data().begin(), h.mutable_data().end(), value);
  }
  return out;
}

Outcome merge_identities() {
  const Model m = Model::init(ModelConfig::toy(), 11);
  bool mean = true, identity = true, closed = true;
  double scale_err = 0.0;
  const auto a = constant_layer(m.decoder[0], 2.0f), b = constant_layer(m.decoder[0], 4.0f);
  for (const auto& [n, t] : merge_pair(a, b, 1, 1).named_tensors())
    for (float v : t.data()) mean &= v == 3.0f;
  for (const auto& [n, t] : merge_pair(a, b, 1, 3).named_tensors())
    for (float v : t.data()) closed &= v == 3.5f;
  // General mean on real layers against f64.
  const auto avg = merge_pair(m.decoder[2], m.decoder[3], 1, 1).named_tensors();
  const auto x = m.decoder[2].named_tensors(), y = m.decoder[3].named_tensors();
  for (std::size_t k = 0; k < avg.size(); ++k)
    for (std::size_t i = 0; i < avg[k].second.data().size(); ++i)
      mean &= std::abs(avg[k].second.data()[i] - 0.5 * (double(x[k].second.data()[i]) + y[k].second.data()[i])) <= 1e-7;
  for (float alpha : {0.3f, 1.0f, 2.5f}) {
    const auto id = merge_pair(m.decoder[0], m.decoder[1], alpha, 0.0f).named_tensors();
    const auto src = m.decoder[0].named_tensors();
    for (std::size_t k = 0; k < id.size(); ++k)
      identity &= std::memcmp(id[k].second.data().data(), src[k].second.data().data(),
                              id[k].second.data().size_bytes()) == 0;
  }
  const auto ref = merge_pair(m.decoder[4], m.decoder[5], 0.25f, 0.75f).named_tensors();
  for (float c : {0.001f, 0.5f, 4.0f, 1000.0f}) {
    const auto s = merge_pair(m.decoder[4], m.decoder[5], 0.25f * c, 0.75f * c).named_tensors();
    for (std::size_t k = 0; k < s.size(); ++k)
      for (std::size_t i = 0; i < s[k].second.data().size(); ++i)
        scale_err = std::max(scale_err, double(std::abs(s[k].second.data()[i] - ref[k].second.data()[i])));
  }
  return {mean && identity && closed && scale_err <= 1e-7,
          fmt::format("mean {} beta0-bitwise {} closed-form {} scale max|diff| {:.2e}", mean, identity, closed,
                      scale_err)};
}

// ---------------------------------------------------------------- 3

Outcome gradients() {
  constexpr double kTol = 1e-3;
  constexpr int kProbes = 5;
  double worst = 0.0;
  std::string worst_name;
  int groups = 0, failed = 0;
  auto take = [&](const std::string& group, const std::vector<double>& errs) {
    ++groups;
    double w = 0.0;
    for (double e : errs) w = std::max(w, std::isfinite(e) ? e : 1e30);
    const bool ok = static_cast<int>(errs.size()) >= kProbes && w < kTol;
    failed += !ok;
    if (w >= worst) {
      worst = w;
      worst_name = group;
    }
    if (!ok) progress(fmt::format("gradient group {} failed: {} probes, worst {:.3e}", group, errs.size(), w));
  };
  for (const auto& c : grad_cases::op_cases()) {
    std::vector<double> errs;
    for (std::uint64_t s = 1; s <= kProbes; ++s)
      errs.push_back(testing_util::check_op(c.inputs(), c.op, c.ref, 1e-3, s).relative_error);
    take(c.name, errs);
  }
  auto probe_errs = [](const std::vector<grad_cases::Probe>& p) {
    std::vector<double> e;
    for (const auto& x : p) e.push_back(x.relative_error());
    return e;
  };
  take("stage1_loss", probe_errs(grad_cases::stage1_probes(8, 15)));
  take("stage2_loss", probe_errs(grad_cases::stage2_probes(10, 5, 27)));
  std::vector<testing_util::GradReport> logit_reports;
  const auto rho = grad_cases::kd_rho_probes(&logit_reports);
  take("kd_loss.rho", probe_errs(rho));
  std::vector<double> logit_errs;
  for (const auto& r : logit_reports) logit_errs.push_back(r.relative_error);
  take("kd_loss.logits", logit_errs);
  return {failed == 0, fmt::format("{} groups, {} failed, worst rel err {:.2e} ({})", groups, failed, worst, worst_name)};
}

// ---------------------------------------------------------------- 4

Outcome svd_oracle() {
  using MatD = Eigen::MatrixXd;
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(2, 64);
  std::normal_distribution<float> gauss;
  double worst_ey = 0.0, worst_orth = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int m = dim(rng), n = dim(rng);
    const int r = std::uniform_int_distribution<int>(1, std::min(m, n))(rng);
    std::vector<float> v(static_cast<std::size_t>(m) * n);
    for (auto& x : v) x = gauss(rng);
    const auto s = truncated_svd(Tensor::from({m, n}, v), r);
    MatD a(m, n), u(m, r), q(n, r);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) a(i, j) = v[i * n + j];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < r; ++j) u(i, j) = s.u.data()[i * r + j];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < r; ++j) q(i, j) = s.v.data()[i * r + j];
    Eigen::VectorXd sv(r);
    for (int i = 0; i < r; ++i) sv[i] = s.s[i];
    const Eigen::JacobiSVD<MatD> full(a);
    double discarded = 0.0;
    for (int i = r; i < full.singularValues().size(); ++i) discarded += std::pow(full.singularValues()[i], 2);
    const double err = (a - u * sv.asDiagonal() * q.transpose()).squaredNorm();
    worst_ey = std::max(worst_ey, std::abs(err - discarded) / a.squaredNorm());
    worst_orth = std::max({worst_orth, (u.transpose() * u - MatD::Identity(r, r)).cwiseAbs().maxCoeff(),
                           (q.transpose() * q - MatD::Identity(r, r)).cwiseAbs().maxCoeff()});
  }
  return {worst_ey <= 1e-4 && worst_orth <= 1e-5,
          fmt::format("50 matrices, worst |err - discarded|/|A|^2 {:.2e}, worst orthonormality {:.2e}", worst_ey,
                      worst_orth)};
}

// ---------------------------------------------------------------- 5

Outcome distance_closed_forms() {
  const double floor = std::log1p(std::exp(-1.0));
  double worst_floor = 0.0;
  std::mt19937_64 rng(5);
  std::normal_distribution<float> gauss;
  for (int n : {1, 2, 7, 64, 512}) {
    std::vector<float> y(n);
    for (auto& v : y) v = gauss(rng);
    const Tensor t = Tensor::from({n}, y);
    worst_floor = std::max(worst_floor, std::abs(feature_distance(t, t).item() - floor));
  }
  const double a = feature_distance(Tensor::from({2}, {1, 0}), Tensor::from({2}, {0, 1})).item();
  const double b = feature_distance(Tensor::from({2}, {1, 1}), Tensor::from({2}, {-1, -1})).item();
  const double ea = std::abs(a - 1.693147), eb = std::abs(b - 3.313262);
  return {worst_floor <= 1e-6 && ea <= 1e-5 && eb <= 1e-5,
          fmt::format("d(y,y) max|diff| {:.1e}; examples {:.6f} {:.6f}", worst_floor, a, b)};
}

// ---------------------------------------------------------------- 6-9

struct SeedRun {
  std::uint64_t seed = 0;
  CorpusSet data;
  Model base;
  Model stage1;
  Model stage2;
  double base_acc = 0, stage1_acc = 0, stage2_acc = 0;
};

TrainConfig recipe(std::uint64_t seed, int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.learning_rate = 1e-3f;
  t.seed = seed;
  t.eval_wer_limit = 0;
  return t;
}

SeedRun run_seed(std::uint64_t seed) {
  SeedRun r;
  r.seed = seed;
  r.data = generate_corpus(seed);
  r.base = finetune_base(ModelConfig::toy(), r.data, recipe(seed, 10));
  r.base_acc = evaluate(r.base, r.data.test).token_accuracy;
  progress(fmt::format("seed {} base accuracy {:.4f}", seed, r.base_acc));
  const Model merged = merge_decoder(r.base, MergeSpec::adjacent(r.base.config.decoder_layers));
  r.stage1 = retrain_stage1(merged, r.base, r.data, recipe(seed, 4), LossWeights{}).student;
  r.stage1_acc = evaluate(r.stage1, r.data.test).token_accuracy;
  progress(fmt::format("seed {} stage-1 accuracy {:.4f}", seed, r.stage1_acc));
  r.stage2 = retrain_stage2(decompose_model(r.stage1, 16), r.stage1.embedding.table, r.data, recipe(seed, 4));
  r.stage2_acc = evaluate(r.stage2, r.data.test).token_accuracy;
  progress(fmt::format("seed {} stage-2 accuracy {:.4f}", seed, r.stage2_acc));
  return r;
}

Outcome relative_accuracy(const std::vector<SeedRun>& runs) {
  std::vector<double> s1, s2;
  std::string detail;
  for (const auto& r : runs) {
    s1.push_back(r.stage1_acc / r.base_acc);
    s2.push_back(r.stage2_acc / r.base_acc);
    detail += fmt::format("seed {}: base {:.3f} s1 {:.3f} s2 {:.3f}; ", r.seed, r.base_acc, r.stage1_acc, r.stage2_acc);
  }
  const double m1 = median3(s1), m2 = median3(s2);
  return {m1 >= 0.90 && m2 >= 0.85, detail + fmt::format("median ratios stage-1 {:.3f} stage-2 {:.3f}", m1, m2)};
}

Outcome merge_beats_prune(const std::vector<SeedRun>& runs) {
  TrainConfig shortrun;
  shortrun.epochs = 1;
  shortrun.max_steps_per_epoch = 60;
  shortrun.learning_rate = 1e-3f;
  shortrun.eval_wer_limit = 0;
  int wins = 0;
  std::string detail;
  for (const auto& r : runs) {
    shortrun.seed = r.seed;
    const int layers = r.base.config.decoder_layers;
    auto retrained_ce = [&](const Model& student) {
      const auto s = retrain_stage1(student, r.base, r.data, shortrun, LossWeights{});
      return eval_cross_entropy(s.student, r.data.dev);
    };
    const double merged = retrained_ce(merge_decoder(r.base, MergeSpec::adjacent(layers)));
    double pruned = 0.0;
    for (std::uint64_t k = 0; k < 5; ++k)
      pruned += retrained_ce(prune_layers_random(r.base, layers / 2, 1000 * r.seed + k)) / 5;
    wins += merged < pruned;
    detail += fmt::format("seed {}: merged {:.4f} pruned mean {:.4f}; ", r.seed, merged, pruned);
    progress(fmt::format("seed {} merged dev CE {:.4f}, pruned mean {:.4f}", r.seed, merged, pruned));
  }
  return {wins >= 2, detail + fmt::format("{}/{} seeds", wins, runs.size())};
}

Outcome speedup(const SeedRun& r) {
  BenchOptions o;
  o.repeats = 41;
  o.warmup = 3;
  o.seed = r.seed;
  const auto reports = bench_interleaved({&r.base, &r.stage1, &r.stage2}, {"base", "stage1", "stage2"}, o);
  const double b = reports[0].tokens_per_second, s1 = reports[1].tokens_per_second, s2 = reports[2].tokens_per_second;
  return {s1 >= 1.3 * b && s2 > s1,
          fmt::format("tokens/s base {:.0f} stage1 {:.0f} ({:.2f}x) stage2 {:.0f} ({:.2f}x, {:.3f}x over stage1)", b,
                      s1, s1 / b, s2, s2 / b, s2 / s1)};
}

Outcome similarity(const SeedRun& r) {
  const auto m = similarity_matrix(capture_activations(r.base, r.data.dev), "dev");
  double asym = 0.0, diag = 0.0;
  for (int a = 0; a < m.layer_count; ++a) {
    diag = std::max(diag, std::abs(m.at(a, a) - 1.0));
    for (int b = 0; b < m.layer_count; ++b) asym = std::max(asym, double(std::abs(m.at(a, b) - m.at(b, a))));
  }
  const double adj = m.adjacent_mean(), far = m.distant_mean(3);
  return {adj > far && asym <= 1e-5 && diag <= 1e-5,
          fmt::format("adjacent {:.4f} vs gap>=3 {:.4f}; asymmetry {:.1e}; diagonal {:.1e}", adj, far, asym, diag)};
}

// ---------------------------------------------------------------- 10

Outcome quadratic_search() {
  SearchSpace s;
  s.params = {{"a", 0.0, 1.0}, {"b", 0.0, 1.0}};
  s.budget = 30;
  auto f = [](const std::vector<double>& x) { return std::pow(x[0] - 0.2, 2) + std::pow(x[1] - 0.8, 2); };
  int hits = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto r = optimize(s, f, seed);
    const double linf = std::max(std::abs(r.best->params[0] - 0.2), std::abs(r.best->params[1] - 0.8));
    hits += linf <= 0.1;
    detail += fmt::format("{:.3f} ", linf);
  }
  return {hits >= 4, fmt::format("{}/5 within 0.1 (L-inf: {})", hits, detail)};
}

// ---------------------------------------------------------------- 11

std::vector<float> probe_logits(const Model& m) {
  const auto src = TokenBatch::from_rows({{5, 9, 12, 40, 1}, {7, 8, 1}});
  const auto tgt = TokenBatch::from_rows({{kBos, 12, 9}, {kBos, 8}});
  const auto out = forward(m, src, tgt);
  return {out.data().begin(), out.data().end()};
}

// A loaded model is complete when every parameter the config implies is
// present and finite.
bool complete(const Model& m) {
  if (m.parameter_count() != param_count(m.config)) return false;
  for (const auto& [n, t] : m.named_parameters())
    for (float v : t.data())
      if (!std::isfinite(v)) return false;
  return static_cast<int>(m.decoder.size()) == m.config.decoder_layers &&
         static_cast<int>(m.encoder.size()) == m.config.encoder_layers &&
         m.embedding.factored() == m.config.rank.has_value();
}

std::string mutate(const std::string& bytes, std::mt19937_64& rng) {
  using container_util::json;
  auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % std::max<std::size_t>(n, 1)); };
  std::string out = bytes;
  switch (rng() % 10) {
    case 0:  // flip bits
      for (int k = 0, n = 1 + pick(4); k < n; ++k) out[pick(out.size())] ^= static_cast<char>(1u << pick(8));
      return out;
    case 1:  // truncate
      return out.substr(0, pick(out.size()));
    case 2: {  // insert
      std::string junk(1 + pick(16), '\0');
      for (auto& c : junk) c = static_cast<char>(rng());
      return out.insert(pick(out.size()), junk);
    }
    case 3:  // delete a span
      return out.erase(pick(out.size()), 1 + pick(32));
    case 4:  // header length
      out[pick(8)] = static_cast<char>(rng());
      return out;
    default:
      break;
  }
  // Structural edits, re-sealed so that the checksum passes.
  auto c = container_util::split(bytes);
  std::vector<std::string> names;
  for (const auto& [n, e] : c.header.items())
    if (n != "__manifest__") names.push_back(n);
  json& e = c.header[names[pick(names.size())]];
  switch (rng() % 9) {
    case 0:
      e["offsets"][pick(2)] = e["offsets"][0].get<std::int64_t>() + static_cast<std::int64_t>(pick(64)) - 32;
      break;
    case 1:
      e["shape"][pick(e["shape"].size())] = static_cast<int>(pick(600));
      break;
    case 2:
      e["dtype"] = pick(2) ? "f16" : "i32";
      break;
    case 3:
      c.header.erase(names[pick(names.size())]);
      break;
    case 4: {
      const std::string n = names[pick(names.size())];
      c.header[n + "x"] = c.header[n];
      c.header.erase(n);
      break;
    }
    case 5: {
      auto& cfg = c.header["__manifest__"]["config"];
      std::vector<std::string> keys;
      for (const auto& [k, v] : cfg.items()) keys.push_back(k);
      cfg[keys[pick(keys.size())]] = static_cast<int>(pick(700)) - 50;
      break;
    }
    case 6:
      c.header["__manifest__"]["rank"] = static_cast<int>(pick(80));
      break;
    case 7:
      c.payload.resize(pick(c.payload.size()));
      break;
    default:
      e["shape"].push_back(1 + pick(3));
      break;
  }
  return container_util::seal(c);
}

Outcome container_fuzz() {
  ModelConfig cfg = ModelConfig::toy();
  cfg.encoder_layers = 1;
  cfg.decoder_layers = 2;
  const Model dense = Model::init(cfg, 21);
  const Model factored = decompose_model(dense, 8);

  bool round_trip = true;
  const auto dir = std::filesystem::temp_directory_path() / "tcomp_acceptance";
  for (const Model* m : {&dense, &factored}) {
    const auto path = dir / "roundtrip.ckpt";
    save_checkpoint(*m, path);
    round_trip &= probe_logits(load_checkpoint(path)) == probe_logits(*m);
  }

  std::mt19937_64 rng(31);
  int rejected = 0, loaded = 0, partial = 0, other = 0;
  const std::string originals[] = {serialize_checkpoint(dense), serialize_checkpoint(factored)};
  for (int trial = 0; trial < 1000; ++trial) {
    const std::string& orig = originals[trial % 2];
    const std::string bytes = mutate(orig, rng);
    try {
      const Model m = parse_checkpoint(bytes);
      ++loaded;
      const bool same = bytes == orig;
      if (!complete(m) || (same && probe_logits(m) != probe_logits(trial % 2 ? factored : dense))) ++partial;
    } catch (const FormatError&) {
      ++rejected;
    } catch (const std::exception& e) {
      ++other;
      progress(fmt::format("mutation {} raised a non-format error: {}", trial, e.what()));
    }
  }
  return {round_trip && partial == 0 && other == 0,
          fmt::format("round trip bit-exact {}; 1000 mutations: {} rejected, {} loaded complete, {} partial, {} other",
                      round_trip, rejected, loaded - partial, partial, other)};
}

}  // namespace

int main() {
  run(1, "parameter counts", param_counts);
  run(2, "merge identities", merge_identities);
  run(3, "gradient suite", gradients);
  run(4, "svd vs f64 oracle", svd_oracle);
  run(5, "feature distance closed forms", distance_closed_forms);
  run(10, "quadratic search", quadratic_search);
  run(11, "checkpoint round trip and fuzz", container_fuzz);

  std::vector<SeedRun> runs;
  const auto start = clk::now();
  std::string training_error;
  try {
    for (std::uint64_t seed : {1, 2, 3}) runs.push_back(run_seed(seed));
  } catch (const std::exception& e) {
    training_error = e.what();
  }
  progress(fmt::format("pipelines trained in {:.0f}s", std::chrono::duration<double>(clk::now() - start).count()));
  auto needs_runs = [&](const std::function<Outcome()>& body) {
    return [&, body] { return runs.size() == 3 ? body() : Outcome{false, "training failed: " + training_error}; };
  };
  run(6, "relative accuracy", needs_runs([&] { return relative_accuracy(runs); }));
  run(7, "merging beats random pruning", needs_runs([&] { return merge_beats_prune(runs); }));
  run(8, "decode speedup", needs_runs([&] { return speedup(runs[0]); }));
  run(9, "layer similarity structure", needs_runs([&] { return similarity(runs[0]); }));

  fmt::print("{} criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
