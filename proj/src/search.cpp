// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0

#include "tcomp/search.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include "tcomp/error.hpp"
#include "tcomp/log.hpp"

namespace tcomp {

void SearchSpace::validate() const {
  if (params.empty()) throw SpecError("search space has no parameters");
  for (const auto& p : params) {
    if (!std::isfinite(p.low) || !std::isfinite(p.high) || !(p.low < p.high)) {
      throw SpecError(fmt::format("search parameter '{}' needs finite bounds with low < high", p.name));
    }
  }
  if (budget < 1) throw SpecError("search budget must be at least 1");
  if (warmup < 1) throw SpecError("search warmup must be at least 1");
}

SearchSpace SearchSpace::merge_weights() {
  SearchSpace s;
  s.params = {{"alpha", 0.0, 1.0}, {"beta", 0.0, 1.0}};
  s.feasible = [](const std::vector<double>& x) { return x[0] + x[1] > 0.0; };
  return s;
}

SearchSpace SearchSpace::loss_weights() {
  SearchSpace s;
  s.params = {{"lambda", 0.0, 2.0}, {"gamma", 0.0, 2.0}};
  s.feasible = [](const std::vector<double>& x) { return x[0] + x[1] > 0.0; };
  return s;
}

namespace {

constexpr int kPrimes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53};
constexpr double kJitter = 1e-6;

double radical_inverse(std::size_t index, int base) {
  double result = 0.0, f = 1.0 / base;
  while (index > 0) {
    result += f * static_cast<double>(index % base);
    index /= base;
    f /= base;
  }
  return result;
}

std::vector<double> to_space(const SearchSpace& space, const std::vector<double>& unit) {
  std::vector<double> x(unit.size());
  for (std::size_t d = 0; d < unit.size(); ++d) {
    const auto& p = space.params[d];
    x[d] = std::clamp(p.low + unit[d] * (p.high - p.low), p.low, p.high);
  }
  return x;
}

std::vector<double> to_unit(const SearchSpace& space, const std::vector<double>& x) {
  std::vector<double> u(x.size());
  for (std::size_t d = 0; d < x.size(); ++d) {
    const auto& p = space.params[d];
    u[d] = (x[d] - p.low) / (p.high - p.low);
  }
  return u;
}

bool is_feasible(const SearchSpace& space, const std::vector<double>& x) {
  return !space.feasible || space.feasible(x);
}

// The `ordinal`-th feasible point of the quasi-random sequence.
std::vector<double> warmup_point(const SearchSpace& space, std::size_t ordinal, std::uint64_t seed) {
  std::size_t found = 0;
  for (std::size_t k = 0; k < 100000; ++k) {
    auto x = to_space(space, quasi_random_point(k, space.dims(), seed));
    if (!is_feasible(space, x)) continue;
    if (found++ == ordinal) return x;
  }
  throw SpecError("search space has no feasible quasi-random points");
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

struct Gp {
  std::vector<std::vector<double>> x;
  Eigen::LLT<Eigen::MatrixXd> llt;
  Eigen::VectorXd alpha;
  double length_scale = 1.0;
  double lml = -std::numeric_limits<double>::infinity();
  double best = 0.0;  // lowest standardized observation
};

double kernel(const std::vector<double>& a, const std::vector<double>& b, double ls) {
  return std::exp(-0.5 * sq_dist(a, b) / (ls * ls));
}

Gp fit_gp(const std::vector<Trial>& history, const SearchSpace& space) {
  Gp gp;
  std::vector<double> y;
  for (const auto& t : history) {
    if (!t.completed()) continue;
    gp.x.push_back(to_unit(space, t.params));
    y.push_back(t.objective);
  }
  const auto n = static_cast<Eigen::Index>(y.size());
  double mu = 0.0;
  for (double v : y) mu += v;
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (double v : y) var += (v - mu) * (v - mu);
  const double sd = var > 0.0 ? std::sqrt(var / static_cast<double>(n)) : 1.0;
  Eigen::VectorXd ys(n);
  for (Eigen::Index i = 0; i < n; ++i) ys[i] = (y[i] - mu) / sd;
  gp.best = ys.minCoeff();

  // Length-scale by marginal likelihood over a log grid.
  for (int g = 0; g < 40; ++g) {
    const double ls = 0.02 * std::pow(250.0, g / 39.0);
    Eigen::MatrixXd k(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) k(i, j) = kernel(gp.x[i], gp.x[j], ls) + (i == j ? kJitter : 0.0);
    }
    Eigen::LLT<Eigen::MatrixXd> llt(k);
    if (llt.info() != Eigen::Success) continue;
    Eigen::VectorXd a = llt.solve(ys);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const double lml = -0.5 * ys.dot(a) - 0.5 * logdet - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
    if (lml > gp.lml) {
      gp.lml = lml;
      gp.length_scale = ls;
      gp.llt = llt;
      gp.alpha = a;
    }
  }
  if (!std::isfinite(gp.lml)) throw NumericalError("search: Gaussian-process fit failed for every length-scale");
  return gp;
}

double ei_at(const Gp& gp, const std::vector<double>& u) {
  const auto n = static_cast<Eigen::Index>(gp.x.size());
  Eigen::VectorXd k(n);
  for (Eigen::Index i = 0; i < n; ++i) k[i] = kernel(u, gp.x[i], gp.length_scale);
  const double mean = k.dot(gp.alpha);
  const double var = std::max(0.0, 1.0 + kJitter - k.dot(gp.llt.solve(k)));
  const double sd = std::sqrt(var);
  const double gain = gp.best - mean;
  if (sd < 1e-12) return std::max(gain, 0.0);
  const double z = gain / sd;
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return gain * cdf + sd * pdf;
}

std::vector<std::vector<double>> candidates(const std::vector<Trial>& history, const SearchSpace& space,
                                            std::uint64_t seed) {
  const std::size_t d = space.dims();
  std::vector<std::vector<double>> out;
  // Regular grid including the faces of the cube.
  const auto per_axis = std::max<std::size_t>(2, static_cast<std::size_t>(std::pow(4000.0, 1.0 / static_cast<double>(d))));
  std::size_t total = 1;
  for (std::size_t i = 0; i < d; ++i) total *= per_axis;
  for (std::size_t k = 0; k < total; ++k) {
    std::vector<double> u(d);
    std::size_t rest = k;
    for (std::size_t i = 0; i < d; ++i) {
      u[i] = static_cast<double>(rest % per_axis) / static_cast<double>(per_axis - 1);
      rest /= per_axis;
    }
    out.push_back(std::move(u));
  }
  std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * (history.size() + 1)));
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  for (int k = 0; k < 1000; ++k) {
    std::vector<double> u(d);
    for (auto& v : u) v = uniform(rng);
    out.push_back(std::move(u));
  }
  // Local refinement around the incumbent.
  const Trial* best = nullptr;
  for (const auto& t : history) {
    if (t.completed() && (!best || t.objective < best->objective)) best = &t;
  }
  if (best) {
    const auto centre = to_unit(space, best->params);
    std::normal_distribution<double> step(0.0, 0.03);
    for (int k = 0; k < 300; ++k) {
      std::vector<double> u(d);
      for (std::size_t i = 0; i < d; ++i) u[i] = std::clamp(centre[i] + step(rng), 0.0, 1.0);
      out.push_back(std::move(u));
    }
  }
  return out;
}

}  // namespace

std::vector<double> quasi_random_point(std::size_t index, std::size_t dims, std::uint64_t seed) {
  if (dims > std::size(kPrimes)) throw SpecError("quasi-random sequence supports at most 16 dimensions");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> u(dims);
  for (std::size_t d = 0; d < dims; ++d) {
    const double shift = uniform(rng);
    const double v = radical_inverse(index + 1, kPrimes[d]) + shift;
    u[d] = v - std::floor(v);
  }
  return u;
}

std::vector<double> expected_improvement(const std::vector<Trial>& history, const SearchSpace& space,
                                         const std::vector<std::vector<double>>& unit_points, GpFit* fit) {
  const bool any = std::any_of(history.begin(), history.end(), [](const Trial& t) { return t.completed(); });
  if (!any) throw SpecError("expected_improvement: no completed trials");
  const Gp gp = fit_gp(history, space);
  if (fit) *fit = {gp.length_scale, gp.lml};
  std::vector<double> out;
  out.reserve(unit_points.size());
  for (const auto& u : unit_points) out.push_back(ei_at(gp, u));
  return out;
}

std::vector<double> suggest(const std::vector<Trial>& history, const SearchSpace& space, std::uint64_t seed) {
  space.validate();
  const bool any = std::any_of(history.begin(), history.end(), [](const Trial& t) { return t.completed(); });
  if (history.size() < static_cast<std::size_t>(space.warmup)) return warmup_point(space, history.size(), seed);
  if (!any) {
    log_warning("search: no completed trials yet, falling back to quasi-random suggestions");
    return warmup_point(space, history.size(), seed);
  }
  const auto units = candidates(history, space, seed);
  const auto ei = expected_improvement(history, space, units);
  double best_ei = -1.0;
  std::vector<double> best;
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (ei[i] <= best_ei) continue;
    auto x = to_space(space, units[i]);
    if (!is_feasible(space, x)) continue;
    best_ei = ei[i];
    best = std::move(x);
  }
  if (best.empty()) throw SpecError("search: no feasible candidate");
  return best;
}

SearchResult optimize(const SearchSpace& space, const Objective& objective, std::uint64_t seed) {
  space.validate();
  SearchResult result;
  for (int it = 0; it < space.budget; ++it) {
    Trial trial;
    trial.params = suggest(result.history, space, seed);
    try {
      trial.objective = objective(trial.params);
      if (!std::isfinite(trial.objective)) {
        trial.status = TrialStatus::kFailed;
        trial.error = "non-finite objective";
      }
    } catch (const std::exception& e) {
      trial.status = TrialStatus::kFailed;
      trial.error = e.what();
    }
    if (!trial.completed()) log_warning(fmt::format("search: trial {} failed: {}", it, trial.error));
    if (trial.completed() && (!result.best || trial.objective < result.best->objective)) result.best = trial;
    result.history.push_back(std::move(trial));
  }
  return result;
}

std::string trials_csv(const SearchSpace& space, const std::vector<Trial>& history) {
  std::string out = "iteration";
  for (const auto& p : space.params) out += "," + p.name;
  out += ",objective,status\n";
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& t = history[i];
    out += std::to_string(i);
    for (double v : t.params) out += fmt::format(",{:.9g}", v);
    out += t.completed() ? fmt::format(",{:.9g},completed\n", t.objective) : ",,failed\n";
  }
  return out;
}

void write_trials_csv(const SearchSpace& space, const std::vector<Trial>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << trials_csv(space, history);
}

std::string best_params_json(const SearchSpace& space, const Trial& best) {
  nlohmann::json j;
  for (std::size_t i = 0; i < space.params.size(); ++i) j[space.params[i].name] = best.params[i];
  j["objective"] = best.objective;
  return j.dump(2);
}

}  // namespace tcomp
