#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace scatsep {

enum class WaveletFamily : std::uint32_t { BattleLemarie = 0, MorletLike = 1 };

std::string to_string(WaveletFamily family);
WaveletFamily parse_family(const std::string& name);

struct FilterBankOptions {
  /// Polynomial degree of the Battle-Lemarie spline. Degree 5 is the lowest
  /// odd degree whose octave band holds at least 90% of the filter energy.
  int spline_degree = 5;
  /// Divide every filter by the square root of the discrete Littlewood-Paley
  /// sum so that the transform conserves energy to machine precision.
  bool renormalize = true;
};

/// Dyadic analytic filter bank on the DFT grid of a length-L signal.
///
/// Channels are indexed 1..J+1. Channels 1..J are band-pass analytic wavelets
/// (zero on negative frequencies and at DC) concentrated in
/// [2^-j pi, 2^(-j+1) pi]. Channel J+1 is the real, symmetric low-pass filter.
/// Spectra are real-valued. The Littlewood-Paley sum is measured on the
/// Hermitian-symmetrized response seen by real signals:
///   LP(k) = 1/2 sum_j (|psi_j(k)|^2 + |psi_j(L-k)|^2) + |phi(k)|^2,
/// except at the Nyquist bin, which is its own mirror.
class FilterBank {
 public:
  FilterBank() = default;
  FilterBank(int octaves, std::size_t length, WaveletFamily family,
             std::vector<std::vector<double>> spectra);

  int octaves() const noexcept { return octaves_; }
  std::size_t length() const noexcept { return length_; }
  WaveletFamily family() const noexcept { return family_; }
  int channels() const noexcept { return octaves_ + 1; }

  /// Spectrum of channel j in 1..J+1 (J+1 is the low-pass).
  std::span<const double> spectrum(int j) const;
  std::span<const double> lowpass() const { return spectrum(octaves_ + 1); }

  /// Littlewood-Paley sum at bin k in [0, L/2].
  double littlewood_paley(std::size_t k) const;
  /// max_k |LP(k) - 1| over bins 1..L/2.
  double lp_residual() const noexcept { return lp_residual_; }

  /// Fraction of the squared spectrum of band-pass channel j that lies in
  /// its nominal octave [2^-j pi, 2^(-j+1) pi].
  double band_concentration(int j) const;

  /// Versioned binary blob: "SCSB", u32 version, u32 J, u64 L, u32 family,
  /// then (J+1) x L little-endian float64 spectra, row-major.
  void save(const std::filesystem::path& path) const;
  static FilterBank load(const std::filesystem::path& path);
  std::vector<std::uint8_t> serialize() const;
  static FilterBank deserialize(std::span<const std::uint8_t> bytes);

  bool operator==(const FilterBank& other) const = default;

 private:
  void compute_residual();

  int octaves_ = 0;
  std::size_t length_ = 0;
  WaveletFamily family_ = WaveletFamily::BattleLemarie;
  std::vector<std::vector<double>> spectra_;
  double lp_residual_ = 0.0;
};

/// Squared modulus of the mother wavelet spectrum at angular frequency omega
/// (omega >= 0), concentrated on [pi, 2 pi].
double mother_wavelet_power(WaveletFamily family, double omega, int spline_degree = 5);

/// Build a bank for J octaves and a length-L signal. Requires J >= 1 and
/// L >= 2^(J+1).
FilterBank build_filterbank(int octaves, std::size_t length, WaveletFamily family,
                            const FilterBankOptions& options = {});

/// Circular wavelet transform: row j-1 of the result holds x * psi_j as
/// interleaved complex samples (length 2L), for j = 1..J+1.
struct WaveletCoeffs {
  int octaves = 0;
  std::size_t length = 0;
  std::vector<std::vector<double>> coeffs;

  double energy() const;
};

WaveletCoeffs wavelet_transform(std::span<const double> signal, const FilterBank& bank);

}  // namespace scatsep
