#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "scatsep/errors.hpp"
#include "scatsep/scatcov.hpp"
#include "scatsep/sourcesep.hpp"
#include "scatsep/synthgen.hpp"

using namespace scatsep;

namespace {

constexpr std::size_t kW = 256;
constexpr int kJ = 4;

std::shared_ptr<const FilterBank> small_bank() { return cached_bank(kJ, kW, WaveletFamily::BattleLemarie); }

std::vector<double> gaussian(std::size_t n, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, sigma);
  std::vector<double> v(n);
  for (double& a : v) a = nd(rng);
  return v;
}

// Small synthetic problem: a 4-tile mixture from a scaled-down dataset and
// snippets from windows elsewhere in the series.
struct SynthProblem {
  std::vector<double> x;
  std::vector<std::vector<double>> snippets;
};

SynthProblem synth_problem(std::size_t n_snippets) {
  SynthConfig c;
  c.w_large = 1024;
  c.w_medium = 256;
  c.w_fine = 64;
  c.eta = 128;
  c.n_days = 4;
  c.seed = 11;
  const SynthDataset d = compose_dataset(c);
  SynthProblem p;
  p.x.assign(d.x.begin(), d.x.begin() + 4 * kW);
  for (std::size_t a = 4 * kW; p.snippets.size() < n_snippets; a += kW)
    p.snippets.emplace_back(d.x.begin() + static_cast<std::ptrdiff_t>(a),
                            d.x.begin() + static_cast<std::ptrdiff_t>(a + kW));
  return p;
}

std::vector<double> scaled(std::vector<double> v, double s) {
  for (double& a : v) a *= s;
  return v;
}

}  // namespace

TEST_CASE("normalizers are positive and floored") {
  std::mt19937_64 rng(1);
  const auto x = gaussian(2 * kW, 1.0, rng);
  std::vector<std::vector<double>> sn;
  for (int i = 0; i < 5; ++i) sn.push_back(gaussian(kW, 1.0, rng));
  const Normalizers n = precompute_normalizers(x, sn, *small_bank(), kW);
  for (const auto* v : {&n.prior, &n.data, &n.cross})
    for (double a : *v) CHECK(a > 0.0);

  // Oracle: plain two-pass sample variance of the snippet statistics.
  const SnippetStats st = snippet_stats(x, sn, *small_bank(), kW);
  for (std::size_t f = 0; f < n.prior.size(); f += 7) {
    double m = 0.0, v = 0.0;
    for (const auto& p : st.psi_s) m += p[f];
    m /= 5.0;
    for (const auto& p : st.psi_s) v += (p[f] - m) * (p[f] - m);
    v /= 4.0;
    if (v > 1e-6) CHECK(n.prior[f] == doctest::Approx(v).epsilon(1e-12));
  }
}

TEST_CASE("identical snippets give floored normalizers without blow-up") {
  std::mt19937_64 rng(2);
  const auto x = gaussian(2 * kW, 1.0, rng);
  const auto s = gaussian(kW, 1.0, rng);
  const std::vector<std::vector<double>> sn(3, s);
  const Normalizers n = precompute_normalizers(x, sn, *small_bank(), kW);
  for (double a : n.prior) {
    CHECK(a > 0.0);
    CHECK(std::isfinite(1.0 / a));
  }
  SeparationProblem p(x, sn, small_bank());
  const LossTerms t = p.evaluate(x, {});
  CHECK(std::isfinite(t.total()));
}

TEST_CASE("normalizers need two snippets") {
  std::mt19937_64 rng(3);
  const auto x = gaussian(kW, 1.0, rng);
  CHECK_THROWS_AS(precompute_normalizers(x, {gaussian(kW, 1.0, rng)}, *small_bank(), kW), InvalidArgument);
}

TEST_CASE("problem sizing errors") {
  std::mt19937_64 rng(4);
  const auto s = gaussian(kW, 1.0, rng);
  CHECK_THROWS_AS(SeparationProblem(gaussian(kW + 3, 1.0, rng), {s, s}, small_bank()), SizingError);
  CHECK_THROWS_AS(SeparationProblem(gaussian(kW, 1.0, rng), {s, gaussian(kW / 2, 1.0, rng)}, small_bank()),
                  SizingError);
  CHECK_THROWS_AS(SeparationProblem(gaussian(kW, 1.0, rng), {}, small_bank()), InvalidArgument);
  Normalizers bad;
  CHECK_THROWS_AS(SeparationProblem(gaussian(kW, 1.0, rng), {s}, small_bank(), bad), SizingError);
}

TEST_CASE("periodic tiling of a single snippet has zero prior loss") {
  std::mt19937_64 rng(5);
  const auto s = gaussian(kW, 1.0, rng);
  std::vector<double> x;
  for (int t = 0; t < 3; ++t) x.insert(x.end(), s.begin(), s.end());
  const std::size_t F = ScatCovLayout(kJ).flat_length();
  Normalizers ones{std::vector<double>(F, 1.0), std::vector<double>(F, 1.0), std::vector<double>(F, 1.0)};
  SeparationProblem p(x, {s}, small_bank(), ones);
  CHECK(p.evaluate(x, {}).prior == 0.0);
}

TEST_CASE("at s1 = x the data term compares each snippet with the mixture") {
  std::mt19937_64 rng(6);
  const auto x = gaussian(2 * kW, 1.0, rng);
  std::vector<std::vector<double>> sn;
  for (int i = 0; i < 4; ++i) sn.push_back(gaussian(kW, 1.0, rng));
  SeparationProblem p(x, sn, small_bank());
  const LossTerms t = p.evaluate(x, {});
  double expect = 0.0;
  const auto& st = p.stats();
  for (const auto& ps : st.psi_s)
    for (std::size_t f = 0; f < ps.size(); ++f)
      expect += (ps[f] - st.psi_x[f]) * (ps[f] - st.psi_x[f]) / p.normalizers().data[f];
  CHECK(std::isfinite(t.data));
  CHECK(t.data == doctest::Approx(expect).epsilon(1e-9));
  CHECK(t.cross == 0.0);
}

TEST_CASE("gradient matches central differences on a synthetic problem") {
  for (SnippetPairing pairing : {SnippetPairing::Broadcast, SnippetPairing::Cyclic}) {
    const SynthProblem sp = synth_problem(6);
    SeparationOptions opt;
    opt.pairing = pairing;
    opt.cross_first_order_weight = 1.0;
    SeparationProblem p(sp.x, sp.snippets, small_bank(), opt);
    std::mt19937_64 rng(7);
    std::vector<double> s1 = sp.x;
    {
      const auto noise = gaussian(s1.size(), 0.3, rng);
      for (std::size_t k = 0; k < s1.size(); ++k) s1[k] = 0.6 * s1[k] + noise[k];
    }
    std::vector<double> g(s1.size());
    p.evaluate(s1, g);
    const double gmax = std::abs(*std::max_element(g.begin(), g.end(), [](double a, double b) {
      return std::abs(a) < std::abs(b);
    }));
    std::uniform_int_distribution<std::size_t> pick(0, s1.size() - 1);
    int checked = 0;
    while (checked < 20) {
      const std::size_t k = pick(rng);
      if (std::abs(g[k]) < 1e-3 * gmax) continue;
      const double h = 1e-5;
      auto a = s1, b = s1;
      a[k] += h;
      b[k] -= h;
      const double fd = (p.evaluate(a, {}).total() - p.evaluate(b, {}).total()) / (2.0 * h);
      CHECK(std::abs(fd - g[k]) <= 1e-4 * std::abs(g[k]));
      ++checked;
    }
  }
}

TEST_CASE("doubling the normalizers halves every term and the gradient") {
  const SynthProblem sp = synth_problem(5);
  SeparationProblem base(sp.x, sp.snippets, small_bank());
  const Normalizers& n = base.normalizers();
  Normalizers twice{scaled(n.prior, 2.0), scaled(n.data, 2.0), scaled(n.cross, 2.0)};
  SeparationProblem doubled(sp.x, sp.snippets, small_bank(), twice);

  std::mt19937_64 rng(8);
  std::vector<double> s1 = sp.x;
  const auto noise = gaussian(s1.size(), 0.2, rng);
  for (std::size_t k = 0; k < s1.size(); ++k) s1[k] = 0.8 * s1[k] + noise[k];
  std::vector<double> g1(s1.size()), g2(s1.size());
  const LossTerms t1 = base.evaluate(s1, g1);
  const LossTerms t2 = doubled.evaluate(s1, g2);
  CHECK(t2.prior == 0.5 * t1.prior);
  CHECK(t2.data == 0.5 * t1.data);
  CHECK(t2.cross == 0.5 * t1.cross);
  for (std::size_t k = 0; k < g1.size(); ++k) REQUIRE(g2[k] == 0.5 * g1[k]);

  // One family at a time: only that term moves.
  Normalizers prior_only{scaled(n.prior, 2.0), n.data, n.cross};
  SeparationProblem p3(sp.x, sp.snippets, small_bank(), prior_only);
  const LossTerms t3 = p3.evaluate(s1, {});
  CHECK(t3.prior == 0.5 * t1.prior);
  CHECK(t3.data == t1.data);
  CHECK(t3.cross == t1.cross);
}

TEST_CASE("evaluation is deterministic across repeats and worker counts") {
  const SynthProblem sp = synth_problem(19);
  std::mt19937_64 rng(9);
  std::vector<double> s1 = sp.x;
  const auto noise = gaussian(s1.size(), 0.2, rng);
  for (std::size_t k = 0; k < s1.size(); ++k) s1[k] += noise[k];

  std::vector<std::vector<double>> grads;
  std::vector<double> totals;
  for (std::size_t workers : {1u, 2u, 3u, 1u}) {
    SeparationOptions opt;
    opt.workers = workers;
    SeparationProblem p(sp.x, sp.snippets, small_bank(), opt);
    std::vector<double> g(s1.size());
    totals.push_back(p.evaluate(s1, g).total());
    grads.push_back(g);
  }
  for (std::size_t r = 1; r < grads.size(); ++r) {
    CHECK(totals[r] == totals[0]);
    CHECK(grads[r] == grads[0]);
  }
}

TEST_CASE("cyclic pairing with one repeated snippet matches broadcast") {
  std::mt19937_64 rng(10);
  const auto x = gaussian(3 * kW, 1.0, rng);
  const auto s = gaussian(kW, 1.0, rng);
  const std::size_t F = ScatCovLayout(kJ).flat_length();
  Normalizers ones{std::vector<double>(F, 1.0), std::vector<double>(F, 1.0), std::vector<double>(F, 1.0)};
  SeparationOptions cyc;
  cyc.pairing = SnippetPairing::Cyclic;
  SeparationProblem pb(x, {s}, small_bank(), ones);
  SeparationProblem pc(x, {s}, small_bank(), ones, cyc);
  std::vector<double> s1 = scaled(x, 0.7);
  std::vector<double> gb(x.size()), gc(x.size());
  const LossTerms tb = pb.evaluate(s1, gb);
  const LossTerms tc = pc.evaluate(s1, gc);
  CHECK(tc.data == doctest::Approx(tb.data).epsilon(1e-12));
  CHECK(tc.cross == doctest::Approx(tb.cross).epsilon(1e-12));
  double worst = 0.0, scale = 0.0;
  for (std::size_t k = 0; k < gb.size(); ++k) {
    worst = std::max(worst, std::abs(gb[k] - gc[k]));
    scale = std::max(scale, std::abs(gb[k]));
  }
  CHECK(worst <= 1e-12 * scale);
}

TEST_CASE("separation from s1 = x has a nonincreasing accepted-step loss") {
  const SynthProblem sp = synth_problem(8);
  SeparationConfig cfg;
  cfg.lbfgs.max_iter = 25;
  std::vector<double> ratio;
  const auto res = separate(sp.x, sp.snippets, small_bank(), kW, cfg, [&](const LbfgsStep&, std::span<const double> s1) {
    double a = 0.0, b = 0.0;
    for (std::size_t k = 0; k < s1.size(); ++k) {
      a += (sp.x[k] - s1[k]) * (sp.x[k] - s1[k]);
      b += sp.x[k] * sp.x[k];
    }
    ratio.push_back(std::sqrt(a / b));
    return true;
  });
  REQUIRE(res.trajectory.size() >= 2);
  CHECK(res.trajectory.front().value == doctest::Approx(res.initial.total()).epsilon(1e-12));
  for (std::size_t k = 1; k < res.trajectory.size(); ++k)
    CHECK(res.trajectory[k].value <= res.trajectory[k - 1].value);
  CHECK(res.final_terms.total() <= res.initial.total());
  CHECK(res.s1_hat.size() == sp.x.size());
  for (std::size_t k = 0; k < sp.x.size(); ++k) REQUIRE(res.residual[k] == sp.x[k] - res.s1_hat[k]);
  CHECK(ratio.size() + 1 >= res.trajectory.size());
}

TEST_CASE("zero snippets do not raise the prior loss") {
  std::mt19937_64 rng(12);
  const auto x = gaussian(2 * kW, 1.0, rng);
  const std::vector<std::vector<double>> zeros(2, std::vector<double>(kW, 0.0));
  SeparationConfig cfg;
  cfg.lbfgs.max_iter = 15;
  const auto res = separate(x, zeros, small_bank(), kW, cfg);
  CHECK(std::isfinite(res.initial.total()));
  CHECK(res.final_terms.prior <= res.initial.prior);
}

TEST_CASE("separation runs are bitwise reproducible") {
  const SynthProblem sp = synth_problem(6);
  SeparationConfig cfg;
  cfg.lbfgs.max_iter = 8;
  const auto a = separate(sp.x, sp.snippets, small_bank(), kW, cfg);
  cfg.options.workers = 1;
  const auto b = separate(sp.x, sp.snippets, small_bank(), kW, cfg);
  CHECK(a.s1_hat == b.s1_hat);
  CHECK(a.trajectory.size() == b.trajectory.size());
}

TEST_CASE("multi-scale objective sums single-scale losses") {
  const SynthProblem sp = synth_problem(4);
  std::vector<std::vector<double>> half;
  for (const auto& s : sp.snippets) {
    half.emplace_back(s.begin(), s.begin() + kW / 2);
    half.emplace_back(s.begin() + kW / 2, s.end());
  }
  const auto bank_half = cached_bank(3, kW / 2, WaveletFamily::BattleLemarie);
  SeparationConfig cfg;
  cfg.lbfgs.max_iter = 0;
  const auto multi = separate_multiscale(sp.x, {{sp.snippets, small_bank()}, {half, bank_half}}, cfg);
  SeparationProblem p1(sp.x, sp.snippets, small_bank());
  SeparationProblem p2(sp.x, half, bank_half);
  const double expect = p1.evaluate(sp.x, {}).total() + p2.evaluate(sp.x, {}).total();
  CHECK(multi.initial.total() == doctest::Approx(expect).epsilon(1e-14));
}
