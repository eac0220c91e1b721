// Copyright 2026 The tcomp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Bayesian optimization over a small box: Gaussian-process surrogate with a
// squared-exponential kernel and expected improvement, after a quasi-random
// warmup.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace tcomp {

struct SearchParam {
  std::string name;
  double low = 0.0;
  double high = 1.0;
};

struct SearchSpace {
  std::vector<SearchParam> params;
  int budget = 30;
  int warmup = 5;
  std::string objective = "dev_wer";
  // Candidates failing this test are never suggested.
  std::function<bool(const std::vector<double>&)> feasible;

  void validate() const;  // throws SpecError
  std::size_t dims() const { return params.size(); }

  // alpha, beta in [0, 1] with alpha + beta > 0
  static SearchSpace merge_weights();
  // lambda, gamma in [0, 2] with lambda + gamma > 0
  static SearchSpace loss_weights();
};

enum class TrialStatus { kCompleted, kFailed };

struct Trial {
  std::vector<double> params;  // aligned with SearchSpace::params
  double objective = 0.0;
  TrialStatus status = TrialStatus::kCompleted;
  std::string error;

  bool completed() const { return status == TrialStatus::kCompleted; }
};

/// Next point to evaluate. Deterministic in (history, seed).
std::vector<double> suggest(const std::vector<Trial>& history, const SearchSpace& space, std::uint64_t seed);

/// Expected improvement (minimization) at points in the unit cube, from a
/// GP fitted to the completed trials. Exposed for tests.
struct GpFit {
  double length_scale = 0.0;
  double log_marginal_likelihood = 0.0;
};
std::vector<double> expected_improvement(const std::vector<Trial>& history, const SearchSpace& space,
                                         const std::vector<std::vector<double>>& unit_points,
                                         GpFit* fit = nullptr);

/// Point `index` of the seeded space-filling sequence, in the unit cube.
std::vector<double> quasi_random_point(std::size_t index, std::size_t dims, std::uint64_t seed);

using Objective = std::function<double(const std::vector<double>&)>;

struct SearchResult {
  std::vector<Trial> history;
  std::optional<Trial> best;
};

/// Runs space.budget trials. Exceptions or non-finite values from the
/// objective are recorded as failed trials.
SearchResult optimize(const SearchSpace& space, const Objective& objective, std::uint64_t seed);

/// iteration,<param names...>,objective,status
std::string trials_csv(const SearchSpace& space, const std::vector<Trial>& history);
void write_trials_csv(const SearchSpace& space, const std::vector<Trial>& history, const std::filesystem::path& path);
/// {"<name>": value, ..., "objective": value}
std::string best_params_json(const SearchSpace& space, const Trial& best);

}  // namespace tcomp
