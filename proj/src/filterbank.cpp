#include "scatsep/filterbank.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>

#include "scatsep/errors.hpp"
#include "scatsep/fft.hpp"

namespace scatsep {
namespace {

constexpr char kBankMagic[4] = {'S', 'C', 'S', 'B'};
constexpr std::uint32_t kBankVersion = 1;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Reduce an angle to (-pi, pi].
double reduce(double omega) {
  double r = std::remainder(omega, kTwoPi);
  if (r <= -std::numbers::pi) r += kTwoPi;
  return r;
}

double ipow(double base, int exponent) {
  double result = 1.0;
  while (exponent > 0) {
    if (exponent & 1) result *= base;
    base *= base;
    exponent >>= 1;
  }
  return result;
}

// T(x) = sum_k (x / (x + 2 pi k))^n, so that S_n(x) = T(x) / x^n with
// S_n(x) = sum_k (x + 2 pi k)^-n. T(0) = 1.
double spline_sum(double x, int n) {
  if (x == 0.0) return 1.0;
  const int terms = n >= 12 ? 32 : 96;
  double total = 0.0;
  for (int k = -terms; k <= terms; ++k) total += ipow(x / (x + kTwoPi * k), n);
  return total;
}

// |phi(omega)|^2 for the Battle-Lemarie scaling function.
double bl_scaling_power(double omega, int n) {
  if (omega == 0.0) return 1.0;
  const double r = reduce(omega);
  return ipow(r / omega, n) / spline_sum(r, n);
}

double bl_wavelet_power(double omega, int degree) {
  const int n = 2 * degree + 2;
  // |psi(w)|^2 = 1/2 |h(w/2 + pi)|^2 |phi(w/2)|^2, |h(xi)|^2 = 2 T(r) / T(2r).
  const double r = reduce(0.5 * omega + std::numbers::pi);
  const double filter = spline_sum(r, n) / spline_sum(2.0 * r, n);
  return filter * bl_scaling_power(0.5 * omega, n);
}

double morlet_wavelet_power(double omega) {
  if (omega <= 0.0) return 0.0;
  // Gaussian in log-frequency centred on the geometric middle of [pi, 2pi].
  constexpr double kWidth = 0.3;  // octaves
  const double u = std::log2(omega / (std::numbers::sqrt2 * std::numbers::pi));
  const double amp = std::exp(-u * u / (2.0 * kWidth * kWidth));
  return amp * amp;
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  if (offset + sizeof(T) > bytes.size()) throw FormatError("filter bank blob is truncated");
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  offset += sizeof(T);
  return value;
}

}  // namespace

std::string to_string(WaveletFamily family) {
  switch (family) {
    case WaveletFamily::BattleLemarie: return "battle_lemarie";
    case WaveletFamily::MorletLike: return "morlet_like";
  }
  return "unknown";
}

WaveletFamily parse_family(const std::string& name) {
  if (name == "battle_lemarie" || name == "BattleLemarie" || name == "bl") return WaveletFamily::BattleLemarie;
  if (name == "morlet_like" || name == "MorletLike" || name == "morlet") return WaveletFamily::MorletLike;
  throw InvalidArgument("unknown wavelet family '" + name + "'");
}

double mother_wavelet_power(WaveletFamily family, double omega, int spline_degree) {
  omega = std::abs(omega);
  switch (family) {
    case WaveletFamily::BattleLemarie: return bl_wavelet_power(omega, spline_degree);
    case WaveletFamily::MorletLike: return morlet_wavelet_power(omega);
  }
  throw InvalidArgument("unknown wavelet family");
}

FilterBank::FilterBank(int octaves, std::size_t length, WaveletFamily family,
                       std::vector<std::vector<double>> spectra)
    : octaves_(octaves), length_(length), family_(family), spectra_(std::move(spectra)) {
  if (spectra_.size() != static_cast<std::size_t>(octaves_ + 1))
    throw SizingError("filter bank needs J+1 spectra");
  for (const auto& row : spectra_)
    if (row.size() != length_) throw SizingError("filter spectrum length differs from L");
  compute_residual();
}

std::span<const double> FilterBank::spectrum(int j) const {
  if (j < 1 || j > octaves_ + 1) throw InvalidArgument("channel index out of range");
  return spectra_[static_cast<std::size_t>(j - 1)];
}

double FilterBank::littlewood_paley(std::size_t k) const {
  const std::size_t mirror = (length_ - k) % length_;
  double total = 0.0;
  for (const auto& row : spectra_) {
    if (mirror == k) {
      total += row[k] * row[k];
    } else {
      total += 0.5 * (row[k] * row[k] + row[mirror] * row[mirror]);
    }
  }
  return total;
}

void FilterBank::compute_residual() {
  lp_residual_ = 0.0;
  for (std::size_t k = 1; k <= length_ / 2; ++k)
    lp_residual_ = std::max(lp_residual_, std::abs(littlewood_paley(k) - 1.0));
}

double FilterBank::band_concentration(int j) const {
  if (j < 1 || j > octaves_) throw InvalidArgument("band concentration is defined for band-pass channels");
  const auto row = spectrum(j);
  const double lo = std::ldexp(std::numbers::pi, -j);
  const double hi = 2.0 * lo;
  double inside = 0.0, total = 0.0;
  for (std::size_t k = 1; k <= length_ / 2; ++k) {
    const double omega = kTwoPi * static_cast<double>(k) / static_cast<double>(length_);
    const double e = row[k] * row[k];
    total += e;
    if (omega >= lo && omega <= hi) inside += e;
  }
  return total > 0.0 ? inside / total : 0.0;
}

std::vector<std::uint8_t> FilterBank::serialize() const {
  std::vector<std::uint8_t> out;
  out.reserve(24 + spectra_.size() * length_ * sizeof(double));
  out.insert(out.end(), std::begin(kBankMagic), std::end(kBankMagic));
  put<std::uint32_t>(out, kBankVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(octaves_));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(length_));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(family_));
  for (const auto& row : spectra_)
    for (double v : row) put<double>(out, v);
  return out;
}

FilterBank FilterBank::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kBankMagic, 4) != 0)
    throw FormatError("not a filter bank blob (bad magic)");
  std::size_t offset = 4;
  const auto version = take<std::uint32_t>(bytes, offset);
  if (version != kBankVersion)
    throw FormatError("unsupported filter bank version " + std::to_string(version));
  const auto octaves = take<std::uint32_t>(bytes, offset);
  const auto length = take<std::uint64_t>(bytes, offset);
  const auto family = take<std::uint32_t>(bytes, offset);
  if (family > 1) throw FormatError("unknown wavelet family tag in filter bank blob");
  const std::size_t expected = offset + (octaves + 1) * length * sizeof(double);
  if (bytes.size() != expected) throw FormatError("filter bank blob has the wrong size");
  std::vector<std::vector<double>> spectra(octaves + 1, std::vector<double>(length));
  for (auto& row : spectra)
    for (double& v : row) v = take<double>(bytes, offset);
  return FilterBank(static_cast<int>(octaves), static_cast<std::size_t>(length),
                    static_cast<WaveletFamily>(family), std::move(spectra));
}

void FilterBank::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

FilterBank FilterBank::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

FilterBank build_filterbank(int octaves, std::size_t length, WaveletFamily family,
                            const FilterBankOptions& options) {
  if (octaves < 1) throw SizingError("a filter bank needs at least one octave");
  if (octaves > 60 || length < (std::size_t{1} << (octaves + 1)))
    throw SizingError("signal length " + std::to_string(length) + " is too short for " +
                      std::to_string(octaves) + " octaves (need L >= 2^(J+1))");
  if (family != WaveletFamily::BattleLemarie && family != WaveletFamily::MorletLike)
    throw InvalidArgument("unknown wavelet family");
  if (options.spline_degree < 1) throw InvalidArgument("spline degree must be >= 1");

  const std::size_t half = length / 2;
  const bool even = length % 2 == 0;
  std::vector<std::vector<double>> spectra(octaves + 1, std::vector<double>(length, 0.0));
  auto power = [&](double omega) { return mother_wavelet_power(family, omega, options.spline_degree); };

  for (std::size_t k = 1; k <= half; ++k) {
    const double omega = kTwoPi * static_cast<double>(k) / static_cast<double>(length);
    const bool nyquist = even && k == half;
    const double analytic = nyquist ? 1.0 : std::numbers::sqrt2;
    for (int j = 1; j <= octaves; ++j)
      spectra[j - 1][k] = analytic * std::sqrt(power(std::ldexp(omega, j)));
    // Low-pass: square root of the energy of every coarser octave.
    double tail = 0.0;
    for (int j = octaves + 1; j < octaves + 200; ++j) {
      const double scaled = std::ldexp(omega, j);
      const double term = power(scaled);
      tail += term;
      if (scaled > 64.0 * std::numbers::pi && term < 1e-20 * tail) break;
    }
    const double phi = std::sqrt(tail);
    spectra[octaves][k] = phi;
    spectra[octaves][length - k] = phi;
  }
  spectra[octaves][0] = 1.0;

  if (options.renormalize) {
    FilterBank raw(octaves, length, family, spectra);
    for (std::size_t k = 1; k <= half; ++k) {
      const double lp = raw.littlewood_paley(k);
      if (lp <= 0.0) throw NumericalError("Littlewood-Paley sum vanished at bin " + std::to_string(k));
      const double scale = 1.0 / std::sqrt(lp);
      for (int j = 0; j < octaves; ++j) spectra[j][k] *= scale;
      spectra[octaves][k] *= scale;
      if (length - k != k) spectra[octaves][length - k] *= scale;
    }
  }
  return FilterBank(octaves, length, family, std::move(spectra));
}

double WaveletCoeffs::energy() const {
  double total = 0.0;
  for (const auto& row : coeffs)
    for (double v : row) total += v * v;
  return total;
}

WaveletCoeffs wavelet_transform(std::span<const double> signal, const FilterBank& bank) {
  const std::size_t n = bank.length();
  if (signal.size() != n)
    throw SizingError("signal length " + std::to_string(signal.size()) + " does not match bank length " +
                      std::to_string(n));
  std::vector<double> spectrum(2 * n);
  fft::forward_real(signal, spectrum);
  WaveletCoeffs out{bank.octaves(), n, {}};
  std::vector<double> product(2 * n);
  for (int j = 1; j <= bank.channels(); ++j) {
    const auto filter = bank.spectrum(j);
    for (std::size_t k = 0; k < n; ++k) {
      product[2 * k] = spectrum[2 * k] * filter[k];
      product[2 * k + 1] = spectrum[2 * k + 1] * filter[k];
    }
    std::vector<double> row(2 * n);
    fft::inverse(product, row, n);
    out.coeffs.push_back(std::move(row));
  }
  return out;
}

}  // namespace scatsep
