#include "scatsep/lbfgs.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include "scatsep/errors.hpp"

namespace scatsep {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double inf_norm(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

struct Pair {
  std::vector<double> s, y;
  double rho;
};

struct Probe {
  double t = 0.0;
  double f = 0.0;
  double dg = 0.0;
  std::vector<double> x, g;
};

class Evaluator {
 public:
  Evaluator(const Objective& obj, std::size_t n) : obj_(obj), n_(n) {}

  Probe at(std::span<const double> x0, std::span<const double> d, double t) {
    Probe p;
    p.t = t;
    p.x.resize(n_);
    p.g.assign(n_, 0.0);
    for (std::size_t i = 0; i < n_; ++i) p.x[i] = x0[i] + t * d[i];
    p.f = obj_(p.x, p.g);
    p.dg = dot(p.g, d);
    ++count;
    return p;
  }

  std::size_t count = 0;

 private:
  const Objective& obj_;
  std::size_t n_;
};

// Minimizer of the cubic through (a, fa, da), (b, fb, db), clamped into the
// interior of [lo, hi]; bisects when the interpolant is degenerate.
double cubic_step(double a, double fa, double da, double b, double fb, double db, double lo, double hi) {
  const double d1 = da + db - 3.0 * (fa - fb) / (a - b);
  const double disc = d1 * d1 - da * db;
  double t = 0.5 * (lo + hi);
  if (disc >= 0.0) {
    const double d2 = std::copysign(std::sqrt(disc), b - a);
    const double denom = db - da + 2.0 * d2;
    if (denom != 0.0) {
      const double c = b - (b - a) * (db + d2 - d1) / denom;
      if (std::isfinite(c)) t = c;
    }
  }
  const double width = hi - lo;
  return std::clamp(t, lo + 0.1 * width, hi - 0.1 * width);
}

// Strong-Wolfe search along d. Returns false when no acceptable point is found.
bool strong_wolfe(Evaluator& ev, std::span<const double> x, double f0, double dg0, std::span<const double> d,
                  double t_init, const LbfgsConfig& cfg, Probe& out) {
  Probe prev;
  prev.t = 0.0;
  prev.f = f0;
  prev.dg = dg0;
  double t = t_init;
  const double t_max = 1e10;
  std::size_t evals = 0;

  // Approximate Wolfe: near a minimizer the Armijo test drowns in roundoff,
  // so accept a nonincreasing point whose slope alone certifies decrease.
  auto approx_ok = [&](const Probe& p) {
    return p.f <= f0 && p.dg >= cfg.c2 * dg0 && p.dg <= (2.0 * cfg.c1 - 1.0) * dg0 &&
           std::abs(p.dg) <= -cfg.c2 * dg0;
  };

  auto zoom = [&](Probe lo, Probe hi) -> bool {
    while (evals < cfg.max_line_search) {
      const double a = std::min(lo.t, hi.t), b = std::max(lo.t, hi.t);
      if (b - a <= 1e-16 * std::max(1.0, b)) return false;
      const double tt = cubic_step(lo.t, lo.f, lo.dg, hi.t, hi.f, hi.dg, a, b);
      Probe p = ev.at(x, d, tt);
      ++evals;
      if (!std::isfinite(p.f)) {
        hi = std::move(p);
        continue;
      }
      if (approx_ok(p)) {
        out = std::move(p);
        return true;
      }
      if (p.f > f0 + cfg.c1 * p.t * dg0 || p.f >= lo.f) {
        hi = std::move(p);
      } else {
        if (std::abs(p.dg) <= -cfg.c2 * dg0) {
          out = std::move(p);
          return true;
        }
        if (p.dg * (hi.t - lo.t) >= 0.0) hi = lo;
        lo = std::move(p);
      }
    }
    return false;
  };

  bool first = true;
  while (evals < cfg.max_line_search) {
    Probe p = ev.at(x, d, t);
    ++evals;
    if (!std::isfinite(p.f) || !all_finite(p.g)) {
      // Shrink into the finite region before bracketing.
      t = 0.5 * (prev.t + t);
      continue;
    }
    if (approx_ok(p)) {
      out = std::move(p);
      return true;
    }
    if (p.f > f0 + cfg.c1 * t * dg0 || (!first && p.f >= prev.f)) return zoom(std::move(prev), std::move(p));
    if (std::abs(p.dg) <= -cfg.c2 * dg0) {
      out = std::move(p);
      return true;
    }
    if (p.dg >= 0.0) return zoom(std::move(p), std::move(prev));
    prev = std::move(p);
    first = false;
    t = std::min(2.0 * t, t_max);
  }
  return false;
}

// Backtracking Armijo search along -g.
bool steepest_backtrack(Evaluator& ev, std::span<const double> x, double f0, std::span<const double> g,
                        const LbfgsConfig& cfg, Probe& out) {
  std::vector<double> d(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) d[i] = -g[i];
  const double gg = dot(g, g);
  double t = 1.0 / std::max(1.0, std::sqrt(gg));
  for (int k = 0; k < 60; ++k) {
    Probe p = ev.at(x, d, t);
    if (std::isfinite(p.f) && all_finite(p.g) && p.f <= f0 - cfg.c1 * t * gg && p.f < f0) {
      out = std::move(p);
      return true;
    }
    t *= 0.5;
  }
  return false;
}

}  // namespace

std::string to_string(LbfgsStatus status) {
  switch (status) {
    case LbfgsStatus::Converged: return "converged";
    case LbfgsStatus::MaxIterations: return "max_iterations";
    case LbfgsStatus::LineSearchFailed: return "line_search_failed";
    case LbfgsStatus::NonFinite: return "non_finite";
    case LbfgsStatus::Stopped: return "stopped";
  }
  return "unknown";
}

LbfgsResult lbfgs_minimize(const Objective& objective, std::span<const double> x0, const LbfgsConfig& config,
                           const LbfgsMonitor& monitor) {
  if (config.history == 0) throw InvalidArgument("lbfgs: history must be >= 1");
  if (!(config.c1 > 0.0 && config.c1 < config.c2 && config.c2 < 1.0))
    throw InvalidArgument("lbfgs: need 0 < c1 < c2 < 1");
  const std::size_t n = x0.size();
  Evaluator ev(objective, n);

  LbfgsResult res;
  res.x.assign(x0.begin(), x0.end());
  std::vector<double> g(n, 0.0);
  double f = objective(res.x, g);
  ev.count = 1;
  if (!std::isfinite(f) || !all_finite(g))
    throw NumericalError("lbfgs: objective is not finite at the starting point");

  res.trajectory.push_back({0, f, inf_norm(g), 0.0, 1, false});
  std::deque<Pair> mem;
  std::vector<double> d(n), q(n);
  std::vector<double> alpha;

  auto finish = [&](LbfgsStatus st) {
    res.value = f;
    res.grad_inf = inf_norm(g);
    res.status = st;
    res.evaluations = ev.count;
    return res;
  };

  for (std::size_t it = 1;; ++it) {
    if (inf_norm(g) <= config.grad_tol) return finish(LbfgsStatus::Converged);
    if (it > config.max_iter) return finish(LbfgsStatus::MaxIterations);

    // Two-loop recursion.
    q = g;
    alpha.assign(mem.size(), 0.0);
    for (std::size_t k = mem.size(); k-- > 0;) {
      alpha[k] = mem[k].rho * dot(mem[k].s, q);
      for (std::size_t i = 0; i < n; ++i) q[i] -= alpha[k] * mem[k].y[i];
    }
    double gamma = 1.0;
    if (!mem.empty()) gamma = dot(mem.back().s, mem.back().y) / dot(mem.back().y, mem.back().y);
    for (std::size_t i = 0; i < n; ++i) q[i] *= gamma;
    for (std::size_t k = 0; k < mem.size(); ++k) {
      const double beta = mem[k].rho * dot(mem[k].y, q);
      for (std::size_t i = 0; i < n; ++i) q[i] += mem[k].s[i] * (alpha[k] - beta);
    }
    for (std::size_t i = 0; i < n; ++i) d[i] = -q[i];
    double dg0 = dot(g, d);
    if (!(dg0 < 0.0)) {
      mem.clear();
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
      dg0 = -dot(g, g);
    }

    const double t_init = mem.empty() ? std::min(1.0, 1.0 / std::max(inf_norm(g), 1e-300)) : 1.0;
    const std::size_t before = ev.count;
    Probe p;
    bool fallback = false;
    bool ok = strong_wolfe(ev, res.x, f, dg0, d, t_init, config, p) && p.f <= f;
    if (!ok) {
      fallback = true;
      mem.clear();
      ok = steepest_backtrack(ev, res.x, f, g, config, p);
      if (!ok) return finish(LbfgsStatus::LineSearchFailed);
    }

    Pair pr;
    pr.s.resize(n);
    pr.y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      pr.s[i] = p.x[i] - res.x[i];
      pr.y[i] = p.g[i] - g[i];
    }
    const double sy = dot(pr.s, pr.y);
    if (sy > 1e-12 * std::sqrt(dot(pr.s, pr.s) * dot(pr.y, pr.y)) && sy > 0.0) {
      pr.rho = 1.0 / sy;
      mem.push_back(std::move(pr));
      if (mem.size() > config.history) mem.pop_front();
    }

    res.x = std::move(p.x);
    g = std::move(p.g);
    f = p.f;
    LbfgsStep step{it, f, inf_norm(g), p.t, ev.count - before, fallback};
    res.trajectory.push_back(step);
    if (!std::isfinite(f)) return finish(LbfgsStatus::NonFinite);
    if (monitor && !monitor(step, res.x)) return finish(LbfgsStatus::Stopped);
  }
}

}  // namespace scatsep
