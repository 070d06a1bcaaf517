#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <vector>

#include "scatsep/errors.hpp"
#include "scatsep/filterbank.hpp"

using namespace scatsep;

namespace {

constexpr double kPi = std::numbers::pi;

// Brute-force S_n(w) = sum_k (w + 2 pi k)^-n, no argument reduction.
double oracle_spline_sum(double w, int n) {
  double s = 0.0;
  for (int k = -4000; k <= 4000; ++k) s += std::pow(w + 2.0 * kPi * k, -n);
  return s;
}

// Battle-Lemarie wavelet power written directly from the orthonormal
// spline construction: |psi(w)|^2 = S(w/2 + pi) / (w^n S(w) S(w/2)).
double oracle_bl_power(double w, int degree) {
  const int n = 2 * degree + 2;
  return oracle_spline_sum(0.5 * w + kPi, n) /
         (std::pow(w, n) * oracle_spline_sum(w, n) * oracle_spline_sum(0.5 * w, n));
}

std::vector<double> gaussian(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  std::vector<double> x(n);
  for (auto& v : x) v = dist(rng);
  return x;
}

double norm2(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return s;
}

}  // namespace

TEST_CASE("paper configuration J=8, L=2^16 has 9 channels and exact LP") {
  const auto bank = build_filterbank(8, 1 << 16, WaveletFamily::BattleLemarie);
  CHECK(bank.channels() == 9);
  CHECK(bank.lp_residual() <= 1e-10);
}

TEST_CASE("smallest legal bank J=1, L=4") {
  const auto bank = build_filterbank(1, 4, WaveletFamily::MorletLike);
  CHECK(bank.channels() == 2);
  CHECK(std::abs(bank.littlewood_paley(1) - 1.0) <= 1e-12);
}

TEST_CASE("LP sum and band structure for several sizes") {
  for (auto family : {WaveletFamily::BattleLemarie, WaveletFamily::MorletLike}) {
    for (int J : {1, 4, 8}) {
      for (std::size_t L : {std::size_t{1} << 10, std::size_t{1} << 12}) {
        const auto bank = build_filterbank(J, L, family);
        CHECK(bank.lp_residual() <= 1e-10);
        for (int j = 1; j <= J; ++j) {
          CHECK(bank.spectrum(j)[0] == 0.0);
          for (std::size_t k = L / 2 + 1; k < L; ++k) REQUIRE(bank.spectrum(j)[k] == 0.0);
        }
        CHECK(bank.lowpass()[0] == 1.0);
      }
    }
  }
}

TEST_CASE("band concentration of every band-pass channel is at least 90%") {
  for (auto family : {WaveletFamily::BattleLemarie, WaveletFamily::MorletLike}) {
    const auto bank = build_filterbank(8, 1 << 14, family);
    for (int j = 1; j <= 8; ++j) CHECK(bank.band_concentration(j) >= 0.9);
  }
}

TEST_CASE("spectra match a brute-force Battle-Lemarie formula") {
  const std::size_t L = 1 << 10;
  FilterBankOptions raw;
  raw.renormalize = false;
  const auto bank = build_filterbank(3, L, WaveletFamily::BattleLemarie, raw);
  double worst = 0.0;
  for (int j = 1; j <= 3; ++j) {
    for (std::size_t k = 1; k < L / 2; ++k) {
      const double w = std::ldexp(2.0 * kPi * static_cast<double>(k) / static_cast<double>(L), j);
      const double turns = w / (2.0 * kPi);
      if (std::abs(turns - std::round(turns)) < 1e-9) continue;  // removable singularity of the oracle
      const double expected = std::sqrt(2.0 * oracle_bl_power(w, 5));
      worst = std::max(worst, std::abs(bank.spectrum(j)[k] - expected));
    }
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("dilation: channel 2 equals channel 1 at twice the frequency") {
  const std::size_t L = 1 << 10;
  FilterBankOptions raw;
  raw.renormalize = false;
  const auto bank = build_filterbank(3, L, WaveletFamily::BattleLemarie, raw);
  // Resample channel 1 onto the grid of channel 2 by picking every other bin.
  std::vector<double> dilated(L / 2, 0.0);
  for (std::size_t k = 1; 2 * k < L / 2; ++k) dilated[k] = bank.spectrum(1)[2 * k];
  double worst = 0.0;
  for (std::size_t k = 1; 2 * k < L / 2; ++k) worst = std::max(worst, std::abs(bank.spectrum(2)[k] - dilated[k]));
  CHECK(worst <= 1e-9);

  // Renormalization only touches bins where the discrete LP sum deviates,
  // which is close to Nyquist; the low-frequency channels keep the relation.
  const auto norm = build_filterbank(3, L, WaveletFamily::BattleLemarie);
  double worst_low = 0.0;
  for (std::size_t k = 1; 2 * k < L / 8; ++k)
    worst_low = std::max(worst_low, std::abs(norm.spectrum(3)[k] - norm.spectrum(2)[2 * k]));
  CHECK(worst_low <= 1e-9);
}

TEST_CASE("energy conservation on random signals") {
  const auto bank = build_filterbank(6, 1 << 11, WaveletFamily::BattleLemarie);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto x = gaussian(bank.length(), seed);
    const auto w = wavelet_transform(x, bank);
    REQUIRE(w.coeffs.size() == 7);
    CHECK(std::abs(w.energy() - norm2(x)) / norm2(x) <= 1e-9);
  }
}

TEST_CASE("impulse and zero inputs") {
  const auto bank = build_filterbank(4, 256, WaveletFamily::BattleLemarie);
  std::vector<double> x(256, 0.0);
  const auto zero = wavelet_transform(x, bank);
  for (const auto& row : zero.coeffs)
    for (double v : row) REQUIRE(v == 0.0);
  x[0] = 1.0;
  CHECK(std::abs(wavelet_transform(x, bank).energy() - 1.0) <= 1e-10);
}

TEST_CASE("a tone inside octave j lands in channel j") {
  const std::size_t L = 1 << 10;
  const auto bank = build_filterbank(6, L, WaveletFamily::BattleLemarie);
  for (int j = 1; j <= 6; ++j) {
    const auto k = static_cast<std::size_t>(std::lround(static_cast<double>(L) * std::numbers::sqrt2 *
                                                        std::ldexp(0.5, -j)));
    std::vector<double> x(L);
    for (std::size_t t = 0; t < L; ++t)
      x[t] = std::cos(2.0 * kPi * static_cast<double>(k * t) / static_cast<double>(L));
    const auto w = wavelet_transform(x, bank);
    double in_channel = 0.0;
    for (double v : w.coeffs[j - 1]) in_channel += v * v;
    const double fraction = in_channel / w.energy();
    // A real tone at bin k reaches an analytic filter only through bin k.
    const double predicted = 0.5 * bank.spectrum(j)[k] * bank.spectrum(j)[k];
    CHECK(fraction == doctest::Approx(predicted).epsilon(1e-9));
    CHECK(fraction >= 0.9);
  }
}

TEST_CASE("sizing and family errors") {
  CHECK_THROWS_AS(build_filterbank(4, 31, WaveletFamily::BattleLemarie), SizingError);
  CHECK_THROWS_AS(build_filterbank(0, 64, WaveletFamily::BattleLemarie), SizingError);
  CHECK_THROWS_AS(parse_family("haar"), InvalidArgument);
  CHECK(parse_family("battle_lemarie") == WaveletFamily::BattleLemarie);
  CHECK_THROWS_AS(build_filterbank(2, 64, static_cast<WaveletFamily>(7)), InvalidArgument);
  const auto bank = build_filterbank(2, 64, WaveletFamily::MorletLike);
  std::vector<double> x(63, 0.0);
  CHECK_THROWS_AS(wavelet_transform(x, bank), SizingError);
}

TEST_CASE("serialization round trip is bitwise") {
  const auto bank = build_filterbank(5, 512, WaveletFamily::BattleLemarie);
  const auto bytes = bank.serialize();
  CHECK(FilterBank::deserialize(bytes) == bank);
  const auto path = std::filesystem::temp_directory_path() / "scatsep_bank_test.scsb";
  bank.save(path);
  CHECK(FilterBank::load(path) == bank);
  std::filesystem::remove(path);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 8);
  CHECK_THROWS_AS(FilterBank::deserialize(truncated), FormatError);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(FilterBank::deserialize(bad), FormatError);
}
