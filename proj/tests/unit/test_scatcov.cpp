#include "doctest.h"

#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <vector>

#include "scatsep/errors.hpp"
#include "scatsep/scatcov.hpp"

using namespace scatsep;
using cd = std::complex<double>;

namespace {

std::vector<double> gaussian(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  std::vector<double> x(n);
  for (auto& v : x) v = dist(rng);
  return x;
}

cd at(const std::vector<double>& row, std::size_t t) { return {row[2 * t], row[2 * t + 1]}; }

// Scattering covariance computed with plain loops from the direct
// (non-tape) scattering coefficients.
std::vector<double> oracle_scatcov(const std::vector<double>& x, const FilterBank& bank) {
  const auto s = compute_scattering(x, bank);
  const ScatCovLayout layout(bank.octaves());
  const int J = bank.octaves();
  const std::size_t L = bank.length();
  auto mean = [&](const std::vector<double>& row) {
    cd m = 0.0;
    for (std::size_t t = 0; t < L; ++t) m += at(row, t);
    return m / static_cast<double>(L);
  };
  auto cov = [&](const std::vector<double>& a, const std::vector<double>& b) {
    cd m = 0.0;
    for (std::size_t t = 0; t < L; ++t) m += at(a, t) * std::conj(at(b, t));
    return m / static_cast<double>(L) - mean(a) * std::conj(mean(b));
  };
  std::vector<double> p(J + 2), mm(J + 2);
  for (int j = 1; j <= J + 1; ++j) {
    for (std::size_t t = 0; t < L; ++t) {
      p[j] += std::norm(at(s.layer1[j - 1], t));
      mm[j] += std::abs(at(s.layer1[j - 1], t));
    }
    p[j] /= static_cast<double>(L);
    mm[j] /= static_cast<double>(L);
  }
  ScatCovVector v;
  v.octaves = J;
  for (int j = 1; j <= J; ++j) v.psi1.push_back(mm[j] * mm[j] / p[j]);
  for (int j = 1; j <= J + 1; ++j) v.psi2.push_back(p[j]);
  for (const auto& [j, jp] : layout.psi3_index())
    v.psi3.push_back(cov(s.layer1[j - 1], s.layer2[layout.layer2_slot(jp, j)]) / std::sqrt(p[j] * p[jp]));
  for (const auto& q : layout.psi4_index())
    v.psi4.push_back(cov(s.layer2[layout.layer2_slot(q[0], q[2])], s.layer2[layout.layer2_slot(q[1], q[2])]) /
                     std::sqrt(p[q[0]] * p[q[1]]));
  return v.flat();
}

double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double scale = 0.0, worst = 0.0;
  for (double v : b) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst / scale;
}

}  // namespace

TEST_CASE("block sizes for J = 1..12") {
  for (int J = 1; J <= 12; ++J) {
    const ScatCovLayout layout(J);
    const std::size_t j = static_cast<std::size_t>(J);
    CHECK(layout.n_psi1() == j);
    CHECK(layout.n_psi2() == j + 1);
    CHECK(layout.n_psi3() == j * (j + 1) / 2);
    CHECK(layout.n_psi4() == j * (j + 1) * (j + 2) / 6);
    CHECK(layout.flat_length() ==
          layout.n_psi1() + layout.n_psi2() + 2 * (layout.n_psi3() + layout.n_psi4() - layout.n_psi4_diag()) +
              layout.n_psi4_diag());
    // Enumerate layer-2 channels by brute force.
    std::size_t pairs = 0;
    for (int a = 1; a <= J + 1; ++a)
      for (int b = 1; b <= J + 1; ++b)
        if (a < b && a <= J) ++pairs;
    CHECK(layout.layer2_index().size() == pairs);
    const auto labels = layout.labels();
    for (const auto& l : labels) REQUIRE(!l.empty());
  }
  const ScatCovLayout eight(8);
  CHECK(eight.layer2_index().size() == 36);
  CHECK(eight.complex_count() == 173);
  CHECK(eight.flat_length() == 293);
}

TEST_CASE("tape scattering covariance matches a loop oracle") {
  for (auto family : {WaveletFamily::BattleLemarie, WaveletFamily::MorletLike}) {
    const auto bank = build_filterbank(5, 512, family);
    const auto x = gaussian(512, 3);
    const auto got = compute_scatcov(x, bank, 512).at(0).flat();
    CHECK(max_rel_diff(got, oracle_scatcov(x, bank)) <= 1e-10);
  }
}

TEST_CASE("zero input gives zero layers and guarded features") {
  const auto bank = build_filterbank(4, 128, WaveletFamily::BattleLemarie);
  std::vector<double> x(256, 0.0);
  const auto s = compute_scattering(std::span<const double>(x.data(), 128), bank);
  for (const auto& row : s.layer1)
    for (double v : row) REQUIRE(v == 0.0);
  for (const auto& row : s.layer2)
    for (double v : row) REQUIRE(v == 0.0);
  for (const auto& v : compute_scatcov(x, bank, 128))
    for (double f : v.flat()) REQUIRE(f == 0.0);
}

TEST_CASE("layer 2 is invariant to the sign of the input") {
  const auto bank = build_filterbank(4, 256, WaveletFamily::BattleLemarie);
  auto x = gaussian(256, 5);
  const auto a = compute_scattering(x, bank);
  for (auto& v : x) v = -v;
  const auto b = compute_scattering(x, bank);
  CHECK(a.layer2 == b.layer2);
}

TEST_CASE("range and amplitude equivariance") {
  const auto bank = build_filterbank(6, 1024, WaveletFamily::BattleLemarie);
  auto x = gaussian(2048, 8);
  const auto base = compute_scatcov(x, bank, 1024);
  for (const auto& v : base) {
    for (double p : v.psi1) CHECK((p >= 0.0 && p <= 1.0));
    for (double p : v.psi2) CHECK(p >= 0.0);
  }
  for (double lambda : {2.0, 3.0}) {
    std::vector<double> y(x);
    for (auto& v : y) v *= lambda;
    const auto scaled = compute_scatcov(y, bank, 1024);
    for (std::size_t t = 0; t < base.size(); ++t) {
      const auto& a = base[t];
      const auto& b = scaled[t];
      const double tol = lambda == 2.0 ? 0.0 : 1e-12;
      for (std::size_t j = 0; j < a.psi1.size(); ++j) CHECK(std::abs(a.psi1[j] - b.psi1[j]) <= tol);
      for (std::size_t j = 0; j < a.psi2.size(); ++j)
        CHECK(std::abs(lambda * lambda * a.psi2[j] - b.psi2[j]) <= tol * b.psi2[j]);
      for (std::size_t p = 0; p < a.psi3.size(); ++p) CHECK(std::abs(a.psi3[p] - b.psi3[p]) <= tol);
      for (std::size_t q = 0; q < a.psi4.size(); ++q) CHECK(std::abs(a.psi4[q] - b.psi4[q]) <= tol);
    }
  }
}

TEST_CASE("cross covariance of a signal with itself is its covariance, bitwise") {
  const auto bank = build_filterbank(5, 512, WaveletFamily::BattleLemarie);
  const auto x = gaussian(1536, 2);
  const auto self = compute_scatcov(x, bank, 512);
  const auto cross = compute_cross_scatcov(x, x, bank, 512);
  REQUIRE(self.size() == 3);
  for (std::size_t t = 0; t < 3; ++t) CHECK(self[t].flat() == cross[t].flat());
  // Determinism across repeated calls.
  CHECK(compute_scatcov(x, bank, 512)[1].flat() == self[1].flat());
}

TEST_CASE("one-sample shift changes the power terms by O(2^-j)") {
  const std::size_t L = 2048;
  const auto bank = build_filterbank(7, L, WaveletFamily::BattleLemarie);
  const auto x = gaussian(L, 12);
  std::vector<double> y(L);
  for (std::size_t t = 0; t < L; ++t) y[t] = x[(t + L - 1) % L];
  const auto self = compute_scatcov(x, bank, L)[0];
  const auto cross = compute_cross_scatcov(x, y, bank, L)[0];
  for (int j = 1; j <= 7; ++j) {
    const double rel = std::abs(cross.psi2[j - 1] - self.psi2[j - 1]) / self.psi2[j - 1];
    CHECK(rel <= 2.0 * std::numbers::pi * std::ldexp(1.0, -j));
  }
}

TEST_CASE("Gaussian fingerprints on a small Monte Carlo") {
  const std::size_t L = 4096;
  const int J = 6;
  const auto bank = build_filterbank(J, L, WaveletFamily::BattleLemarie);
  const int n = 64;
  std::vector<double> sum(J, 0.0), sq(J, 0.0);
  for (int r = 0; r < n; ++r) {
    const auto v = compute_scatcov(gaussian(L, 1000 + r), bank, L)[0];
    for (int j = 0; j < J; ++j) {
      sum[j] += v.psi1[j];
      sq[j] += v.psi1[j] * v.psi1[j];
    }
  }
  for (int j = 0; j < J; ++j) {
    const double m = sum[j] / n;
    const double se = std::sqrt((sq[j] / n - m * m) / (n - 1));
    CHECK(std::abs(m - std::numbers::pi / 4.0) <= 3.0 * se + 1e-3);
  }
}

TEST_CASE("plot reduction") {
  const ScatCovLayout layout(8);
  std::vector<double> ones(layout.flat_length(), 1.0);
  const auto v = ScatCovVector::from_flat(8, ones);
  const auto rows = plot_reduce(v);
  std::size_t psi3_rows = 0;
  for (const auto& r : rows) {
    CHECK(r.value.real() == 1.0);
    if (r.block == "psi3") ++psi3_rows;
    // Diagonal psi4 entries are real, so their group has no imaginary part.
    const bool diagonal = r.block == "psi4" && r.lag_a == 0;
    CHECK(r.value.imag() == (diagonal ? 0.0 : 1.0));
  }
  CHECK(psi3_rows == 8);
}

TEST_CASE("pyramidal features") {
  const std::vector<std::size_t> windows{256, 1024, 4096};
  PyramidOptions opt;
  opt.octaves = 6;
  std::vector<double> zero(5000, 0.0);
  const auto z = compute_pyramidal(zero, windows, opt);
  REQUIRE(z.u.size() == 3);
  for (const auto& u : z.u)
    for (double v : u) REQUIRE(v == 0.0);

  // Longer averaging windows reduce the variance of every coefficient.
  const int n = 64;
  const std::size_t F = ScatCovLayout(6).flat_length();
  std::vector<double> s1(F), q1(F), sK(F), qK(F);
  for (int r = 0; r < n; ++r) {
    const auto f = compute_pyramidal(gaussian(4096, 500 + r), windows, opt);
    for (std::size_t i = 0; i < F; ++i) {
      s1[i] += f.u[0][i];
      q1[i] += f.u[0][i] * f.u[0][i];
      sK[i] += f.u[2][i];
      qK[i] += f.u[2][i] * f.u[2][i];
    }
  }
  std::size_t worse = 0;
  for (std::size_t i = 0; i < F; ++i) {
    const double v1 = q1[i] / n - (s1[i] / n) * (s1[i] / n);
    const double vK = qK[i] / n - (sK[i] / n) * (sK[i] / n);
    if (vK > 0.5 * v1) ++worse;
  }
  CHECK(worse == 0);

  CHECK_THROWS_AS(compute_pyramidal(zero, std::vector<std::size_t>{256, 512}, opt), SizingError);
  CHECK_THROWS_AS(compute_pyramidal(std::vector<double>(1000, 0.0), windows, opt), SizingError);
  CHECK(octaves_for_window(8, 256) == 7);
}

TEST_CASE("tiling errors") {
  const auto bank = build_filterbank(4, 128, WaveletFamily::BattleLemarie);
  std::vector<double> x(300, 0.0);
  CHECK_THROWS_AS(compute_scatcov(x, bank, 128), SizingError);
  CHECK_THROWS_AS(compute_scatcov(std::vector<double>(256, 0.0), bank, 64), SizingError);
  CHECK_THROWS_AS(compute_cross_scatcov(std::vector<double>(256, 0.0), std::vector<double>(128, 0.0), bank, 128),
                  SizingError);
}

TEST_CASE("scattering covariance loss passes a finite-difference check") {
  const std::size_t L = 256;
  const auto bank = build_filterbank(5, L, WaveletFamily::BattleLemarie);
  const ScatCovLayout layout(5);
  const auto target = oracle_scatcov(gaussian(L, 77), bank);
  auto builder = [&](diff::Tape& t, diff::NodeId x) {
    const auto s = record_scattering(t, x, bank, layout);
    const auto psi = record_covariance(t, s, s, layout);
    const auto diffv = t.sub(psi, t.constant({1, target.size()}, target));
    return t.sum_all(t.square(diffv));
  };
  diff::GradcheckOptions opt;
  opt.coordinates = 20;
  opt.seed = 4;
  const auto res = diff::gradcheck(builder, gaussian(L, 78), {1, L}, opt);
  CHECK(res.max_rel_error <= 1e-4);
}
