#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace scatsep {

/// Objective callback: returns f(x) and writes the gradient into `grad`.
using Objective = std::function<double(std::span<const double> x, std::span<double> grad)>;

struct LbfgsConfig {
  std::size_t max_iter = 1000;
  std::size_t history = 10;
  double c1 = 1e-4;
  double c2 = 0.9;
  /// Stop once max |g_i| <= grad_tol.
  double grad_tol = 1e-10;
  std::size_t max_line_search = 40;
};

struct LbfgsStep {
  std::size_t iteration = 0;
  double value = 0.0;
  double grad_inf = 0.0;
  double step = 0.0;
  std::size_t evaluations = 0;
  /// True when the strong-Wolfe search failed and a backtracking steepest
  /// descent step was taken instead.
  bool fallback = false;
};

enum class LbfgsStatus { Converged, MaxIterations, LineSearchFailed, NonFinite, Stopped };

std::string to_string(LbfgsStatus status);

struct LbfgsResult {
  std::vector<double> x;
  double value = 0.0;
  double grad_inf = 0.0;
  LbfgsStatus status = LbfgsStatus::MaxIterations;
  /// Entry 0 is the starting point; one entry per accepted step after it.
  std::vector<LbfgsStep> trajectory;
  std::size_t evaluations = 0;

  std::size_t accepted_steps() const noexcept { return trajectory.empty() ? 0 : trajectory.size() - 1; }
};

/// Called after every accepted step; return false to stop early.
using LbfgsMonitor = std::function<bool(const LbfgsStep& step, std::span<const double> x)>;

/// Limited-memory BFGS with a strong-Wolfe line search (bracketing + zoom with
/// safeguarded cubic interpolation). Accepted values are nonincreasing.
LbfgsResult lbfgs_minimize(const Objective& objective, std::span<const double> x0, const LbfgsConfig& config = {},
                           const LbfgsMonitor& monitor = {});

}  // namespace scatsep
