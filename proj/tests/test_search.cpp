// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>
#include <stdexcept>

#include "tcomp/error.hpp"
#include "tcomp/search.hpp"

using namespace tcomp;

namespace {

double quadratic(const std::vector<double>& x) {
  return (x[0] - 0.2) * (x[0] - 0.2) + (x[1] - 0.8) * (x[1] - 0.8);
}

SearchSpace unit_square(int budget = 30) {
  SearchSpace s;
  s.params = {{"a", 0.0, 1.0}, {"b", 0.0, 1.0}};
  s.budget = budget;
  return s;
}

// Plain GP posterior with an SE kernel on standardized observations, solved
// by a hand Cholesky.
struct GpOracle {
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  double ls = 1.0, jitter = 1e-6, best = 0.0;
  std::vector<double> l;  // lower factor, row-major
  std::vector<double> alpha;

  double k(const std::vector<double>& a, const std::vector<double>& b) const {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::exp(-0.5 * s / (ls * ls));
  }
  std::vector<double> forward_solve(std::vector<double> b) const {
    const std::size_t n = y.size();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < i; ++j) b[i] -= l[i * n + j] * b[j];
      b[i] /= l[i * n + i];
    }
    return b;
  }
  double log_likelihood() const {
    const auto z = forward_solve(y);
    double quad = 0, logdet = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      quad += z[i] * z[i];
      logdet += 2 * std::log(l[i * y.size() + i]);
    }
    return -0.5 * quad - 0.5 * logdet - 0.5 * y.size() * std::log(2 * std::numbers::pi);
  }

  GpOracle(const std::vector<Trial>& history, double length_scale) : ls(length_scale) {
    for (const auto& t : history) {
      if (!t.completed()) continue;
      x.push_back(t.params);
      y.push_back(t.objective);
    }
    const std::size_t n = y.size();
    double mu = 0, var = 0;
    for (double v : y) mu += v;
    mu /= n;
    for (double v : y) var += (v - mu) * (v - mu);
    const double sd = var > 0 ? std::sqrt(var / n) : 1.0;
    for (double& v : y) v = (v - mu) / sd;
    best = *std::min_element(y.begin(), y.end());
    l.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        double s = k(x[i], x[j]) + (i == j ? jitter : 0.0);
        for (std::size_t p = 0; p < j; ++p) s -= l[i * n + p] * l[j * n + p];
        l[i * n + j] = i == j ? std::sqrt(s) : s / l[j * n + j];
      }
    auto z = forward_solve(y);
    alpha.assign(n, 0.0);
    for (std::size_t i = n; i-- > 0;) {
      double s = z[i];
      for (std::size_t j = i + 1; j < n; ++j) s -= l[j * n + i] * alpha[j];
      alpha[i] = s / l[i * n + i];
    }
  }

  double ei(const std::vector<double>& u) const {
    std::vector<double> kv(y.size());
    double mean = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      kv[i] = k(u, x[i]);
      mean += kv[i] * alpha[i];
    }
    const auto v = forward_solve(kv);
    double reduce = 0;
    for (double e : v) reduce += e * e;
    const double sd = std::sqrt(std::max(0.0, 1.0 + jitter - reduce));
    const double gain = best - mean;
    if (sd < 1e-12) return std::max(gain, 0.0);
    const double z = gain / sd;
    return gain * 0.5 * std::erfc(-z / std::numbers::sqrt2) + sd * std::exp(-0.5 * z * z) / std::sqrt(2 * std::numbers::pi);
  }
};

std::vector<Trial> quadratic_history(double noise_sd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, noise_sd);
  std::vector<Trial> h;
  for (int i = 0; i < 12; ++i) {
    Trial t;
    t.params = {u(rng), u(rng)};
    t.objective = quadratic(t.params) + noise(rng);
    h.push_back(t);
  }
  Trial opt;
  opt.params = {0.2, 0.8};
  opt.objective = noise(rng);
  h.push_back(opt);
  return h;
}

std::vector<std::vector<double>> grid(int per_axis) {
  std::vector<std::vector<double>> g;
  for (int i = 0; i < per_axis; ++i)
    for (int j = 0; j < per_axis; ++j) g.push_back({i / double(per_axis - 1), j / double(per_axis - 1)});
  return g;
}

}  // namespace

TEST(Search, SpaceValidation) {
  SearchSpace s = unit_square();
  EXPECT_NO_THROW(s.validate());
  s.params[0].high = 0.0;
  EXPECT_THROW(s.validate(), SpecError);
  s = unit_square(0);
  EXPECT_THROW(s.validate(), SpecError);
  s = unit_square();
  s.params.clear();
  EXPECT_THROW(s.validate(), SpecError);
  s = unit_square();
  s.params[1].low = -INFINITY;
  EXPECT_THROW(s.validate(), SpecError);
}

TEST(Search, WarmupPointsInsideBounds) {
  SearchSpace s;
  s.params = {{"x", -3.0, 5.0}, {"y", 10.0, 10.5}, {"z", 0.0, 1e-3}};
  std::vector<Trial> h;
  for (int i = 0; i < 5; ++i) {
    const auto p = suggest(h, s, 1);
    ASSERT_EQ(p.size(), 3u);
    for (std::size_t d = 0; d < 3; ++d) {
      EXPECT_GE(p[d], s.params[d].low);
      EXPECT_LE(p[d], s.params[d].high);
    }
    h.push_back({p, 1.0});
  }
}

TEST(Search, SuggestIsDeterministic) {
  const auto h = quadratic_history(0.01, 2);
  const SearchSpace s = unit_square();
  EXPECT_EQ(suggest(h, s, 7), suggest(h, s, 7));
  EXPECT_EQ(suggest({}, s, 7), suggest({}, s, 7));
  EXPECT_NE(suggest({}, s, 7), suggest({}, s, 8));
}

TEST(Search, ExpectedImprovementMatchesOracle) {
  const auto h = quadratic_history(1e-3, 3);
  const SearchSpace s = unit_square();
  const auto pts = grid(41);
  GpFit fit;
  const auto ei = expected_improvement(h, s, pts, &fit);
  const GpOracle gp(h, fit.length_scale);
  EXPECT_NEAR(fit.log_marginal_likelihood, gp.log_likelihood(), 1e-6 * std::max(1.0, std::abs(gp.log_likelihood())));
  // The chosen length-scale is a local maximum of the likelihood.
  const double ratio = std::pow(250.0, 1.0 / 39.0);
  for (double f : {ratio, 1 / ratio}) {
    const GpOracle other(h, fit.length_scale * f);
    EXPECT_LE(other.log_likelihood(), fit.log_marginal_likelihood + 1e-9);
  }
  double worst = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) worst = std::max(worst, std::abs(ei[i] - gp.ei(pts[i])));
  EXPECT_LT(worst, 1e-6);
}

TEST(Search, SuggestionLiesInTopDecileOfExpectedImprovement) {
  for (std::uint64_t seed : {4, 5, 6}) {
    const auto h = quadratic_history(1e-3, seed);
    const SearchSpace s = unit_square();
    GpFit fit;
    expected_improvement(h, s, {{0.5, 0.5}}, &fit);
    const GpOracle gp(h, fit.length_scale);
    std::vector<double> dense;
    for (const auto& p : grid(101)) dense.push_back(gp.ei(p));
    std::sort(dense.begin(), dense.end());
    const double decile = dense[dense.size() * 9 / 10];
    const auto next = suggest(h, s, seed);
    EXPECT_GE(gp.ei(next), decile) << "seed " << seed;
  }
}

TEST(Search, QuadraticOptimumFound) {
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = optimize(unit_square(30), quadratic, seed);
    ASSERT_TRUE(r.best);
    const auto& p = r.best->params;
    hits += std::abs(p[0] - 0.2) <= 0.1 && std::abs(p[1] - 0.8) <= 0.1;
  }
  EXPECT_GE(hits, 4);
}

TEST(Search, ConstantObjective) {
  const auto r = optimize(unit_square(8), [](const auto&) { return 3.0; }, 9);
  ASSERT_TRUE(r.best);
  EXPECT_EQ(r.history.size(), 8u);
  for (const auto& t : r.history) EXPECT_EQ(t.objective, 3.0);
  EXPECT_EQ(r.best->objective, 3.0);
}

TEST(Search, MatchesGridSearchOnLipschitzObjective) {
  auto f = [](const std::vector<double>& x) {
    return std::abs(x[0] - 0.63) + 0.5 * std::abs(x[1] - 0.27) + 0.1 * std::sin(7 * x[0]);
  };
  double grid_best = INFINITY;
  for (const auto& p : grid(21)) grid_best = std::min(grid_best, f(p));
  const auto r = optimize(unit_square(60), f, 11);
  ASSERT_TRUE(r.best);
  // Lipschitz constant <= 2.2 in L1; one grid spacing is 0.05.
  EXPECT_LE(r.best->objective, grid_best + 0.05);
}

TEST(Search, BestSoFarNonIncreasingAndBoundsRespected) {
  SearchSpace s = SearchSpace::merge_weights();
  s.budget = 15;
  const auto r = optimize(s, quadratic, 12);
  double best = INFINITY;
  for (const auto& t : r.history) {
    EXPECT_GE(t.params[0], 0.0);
    EXPECT_LE(t.params[0], 1.0);
    EXPECT_GE(t.params[1], 0.0);
    EXPECT_LE(t.params[1], 1.0);
    EXPECT_GT(t.params[0] + t.params[1], 0.0);
    const double next = std::min(best, t.objective);
    EXPECT_LE(next, best);
    best = next;
  }
  EXPECT_EQ(r.best->objective, best);
}

TEST(Search, FailedTrialsAreRecorded) {
  int calls = 0;
  auto flaky = [&](const std::vector<double>& x) {
    ++calls;
    if (calls % 3 == 0) throw std::runtime_error("diverged");
    if (calls % 5 == 0) return std::nan("");
    return quadratic(x);
  };
  const auto r = optimize(unit_square(12), flaky, 13);
  EXPECT_EQ(r.history.size(), 12u);
  int failed = 0;
  for (const auto& t : r.history) failed += !t.completed();
  EXPECT_EQ(failed, 6);  // calls 3, 6, 9, 12 throw; 5, 10 return NaN
  EXPECT_EQ(r.history[2].error, "diverged");
  EXPECT_EQ(r.history[4].error, "non-finite objective");
  ASSERT_TRUE(r.best);
  EXPECT_TRUE(r.best->completed());
}

TEST(Search, AllFailedWarmupFallsBack) {
  const auto r = optimize(unit_square(7), [](const auto&) -> double { throw std::runtime_error("no"); }, 14);
  EXPECT_EQ(r.history.size(), 7u);
  EXPECT_FALSE(r.best);
  EXPECT_THROW(expected_improvement(r.history, unit_square(), {{0.5, 0.5}}), SpecError);
}

TEST(Search, CsvAndJson) {
  const SearchSpace s = SearchSpace::loss_weights();
  std::vector<Trial> h{{{0.5, 1.5}, 0.25}, {{1.0, 0.0}, 0.0, TrialStatus::kFailed, "boom"}};
  EXPECT_EQ(trials_csv(s, h), "iteration,lambda,gamma,objective,status\n0,0.5,1.5,0.25,completed\n1,1,0,,failed\n");
  const auto j = nlohmann::json::parse(best_params_json(s, h[0]));
  EXPECT_EQ(j["lambda"], 0.5);
  EXPECT_EQ(j["gamma"], 1.5);
  EXPECT_EQ(j["objective"], 0.25);
  EXPECT_EQ(s.params[0].high, 2.0);
}
