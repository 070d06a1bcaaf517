#include "scatsep/scatcov.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <tuple>

#include "scatsep/errors.hpp"
#include "scatsep/fft.hpp"

namespace scatsep {

using diff::Axis;
using diff::NodeId;
using diff::Shape;
using diff::Tape;

// ---- layout ----------------------------------------------------------------

ScatCovLayout::ScatCovLayout(int octaves) : octaves_(octaves) {
  if (octaves < 1) throw SizingError("scattering covariance needs J >= 1");
  const int top = octaves + 1;
  for (int j = 2; j <= top; ++j)
    for (int jp = 1; jp < j; ++jp) psi3_.emplace_back(j, jp);
  for (int j1 = 1; j1 <= octaves; ++j1)
    for (int j2 = j1 + 1; j2 <= top; ++j2) layer2_.emplace_back(j1, j2);
  for (int j1 = 1; j1 <= octaves; ++j1)
    for (int j1p = 1; j1p <= j1; ++j1p)
      for (int j2 = j1 + 1; j2 <= top; ++j2) psi4_.push_back({j1, j1p, j2});

  std::size_t pos = off_im4();
  im4_pos_.resize(psi4_.size(), npos);
  for (std::size_t q = 0; q < psi4_.size(); ++q) {
    if (psi4_[q][0] == psi4_[q][1]) {
      ++n_diag_;
    } else {
      im4_pos_[q] = pos++;
    }
  }
  flat_length_ = pos;
}

std::size_t ScatCovLayout::layer2_slot(int j1, int j2) const {
  // Slots are grouped by j1; group j1 holds J+1-j1 entries.
  if (j1 < 1 || j1 >= j2 || j2 > octaves_ + 1) throw InvalidArgument("invalid layer-2 channel");
  std::size_t slot = 0;
  for (int a = 1; a < j1; ++a) slot += static_cast<std::size_t>(octaves_ + 1 - a);
  return slot + static_cast<std::size_t>(j2 - j1 - 1);
}

std::vector<std::string> ScatCovLayout::labels() const {
  std::vector<std::string> out(flat_length_);
  auto s = [](int v) { return std::to_string(v); };
  for (int j = 1; j <= octaves_; ++j) out[off_psi1() + j - 1] = "psi1[" + s(j) + "]";
  for (int j = 1; j <= octaves_ + 1; ++j) out[off_psi2() + j - 1] = "psi2[" + s(j) + "]";
  for (std::size_t p = 0; p < psi3_.size(); ++p) {
    const auto [j, jp] = psi3_[p];
    out[off_re3() + p] = "re psi3[" + s(j) + "," + s(jp) + "]";
    out[off_im3() + p] = "im psi3[" + s(j) + "," + s(jp) + "]";
  }
  for (std::size_t q = 0; q < psi4_.size(); ++q) {
    const auto& t = psi4_[q];
    const std::string idx = "[" + s(t[0]) + "," + s(t[1]) + "," + s(t[2]) + "]";
    out[off_re4() + q] = "re psi4" + idx;
    if (im4_pos_[q] != npos) out[im4_pos_[q]] = "im psi4" + idx;
  }
  return out;
}

std::vector<bool> ScatCovLayout::first_order_mask() const {
  std::vector<bool> mask(flat_length_, false);
  for (std::size_t i = 0; i < n_psi1(); ++i) mask[off_psi1() + i] = true;
  return mask;
}

std::vector<double> ScatCovVector::flat() const {
  const ScatCovLayout layout(octaves);
  if (psi1.size() != layout.n_psi1() || psi2.size() != layout.n_psi2() || psi3.size() != layout.n_psi3() ||
      psi4.size() != layout.n_psi4())
    throw SizingError("scattering covariance blocks do not match J");
  std::vector<double> out(layout.flat_length());
  std::copy(psi1.begin(), psi1.end(), out.begin() + static_cast<std::ptrdiff_t>(layout.off_psi1()));
  std::copy(psi2.begin(), psi2.end(), out.begin() + static_cast<std::ptrdiff_t>(layout.off_psi2()));
  for (std::size_t p = 0; p < psi3.size(); ++p) {
    out[layout.off_re3() + p] = psi3[p].real();
    out[layout.off_im3() + p] = psi3[p].imag();
  }
  for (std::size_t q = 0; q < psi4.size(); ++q) {
    out[layout.off_re4() + q] = psi4[q].real();
    if (layout.im4_position(q) != ScatCovLayout::npos) out[layout.im4_position(q)] = psi4[q].imag();
  }
  return out;
}

ScatCovVector ScatCovVector::from_flat(int octaves, std::span<const double> flat) {
  const ScatCovLayout layout(octaves);
  if (flat.size() != layout.flat_length())
    throw SizingError("flat vector has length " + std::to_string(flat.size()) + ", expected " +
                      std::to_string(layout.flat_length()));
  ScatCovVector v;
  v.octaves = octaves;
  v.psi1.assign(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(layout.n_psi1()));
  v.psi2.assign(flat.begin() + static_cast<std::ptrdiff_t>(layout.off_psi2()),
                flat.begin() + static_cast<std::ptrdiff_t>(layout.off_re3()));
  for (std::size_t p = 0; p < layout.n_psi3(); ++p)
    v.psi3.emplace_back(flat[layout.off_re3() + p], flat[layout.off_im3() + p]);
  for (std::size_t q = 0; q < layout.n_psi4(); ++q) {
    const std::size_t ip = layout.im4_position(q);
    v.psi4.emplace_back(flat[layout.off_re4() + q], ip == ScatCovLayout::npos ? 0.0 : flat[ip]);
  }
  return v;
}

// ---- graph recording -------------------------------------------------------

namespace {

// Real filter spectrum as an interleaved (1, 2L) row: (f, f) pairs so that a
// plain elementwise product scales both parts.
NodeId filter_row(Tape& tape, std::span<const double> spectrum) {
  std::vector<double> row(2 * spectrum.size());
  for (std::size_t k = 0; k < spectrum.size(); ++k) row[2 * k] = row[2 * k + 1] = spectrum[k];
  const Shape shape{1, row.size()};
  return tape.constant(shape, std::move(row));
}

}  // namespace

ScatNodes record_scattering(Tape& tape, NodeId x, const FilterBank& bank, const ScatCovLayout& layout) {
  const std::size_t L = bank.length();
  const Shape shape = tape.shape(x);
  if (shape.cols != L)
    throw SizingError("scattering input has " + std::to_string(shape.cols) + " samples, bank expects " +
                      std::to_string(L));
  if (bank.octaves() != layout.octaves()) throw SizingError("layout and bank disagree on J");
  const int J = bank.octaves();

  ScatNodes out;
  out.rows = shape.rows;
  std::vector<NodeId> filters;
  for (int j = 1; j <= J + 1; ++j) filters.push_back(filter_row(tape, bank.spectrum(j)));

  const NodeId X = tape.dft_real(x);
  for (int j = 1; j <= J + 1; ++j) out.layer1.push_back(tape.idft(tape.mul(X, filters[j - 1])));

  std::vector<NodeId> envelope_spectra;
  for (int j = 1; j <= J; ++j) {
    const NodeId m = tape.modulus(out.layer1[j - 1]);
    out.mean_modulus.push_back(tape.mean(m, Axis::Cols));
    envelope_spectra.push_back(tape.dft_real(m));
  }
  for (const auto& [j1, j2] : layout.layer2_index())
    out.layer2.push_back(tape.idft(tape.mul(envelope_spectra[j1 - 1], filters[j2 - 1])));

  // Ave |w|^2 = 2 * mean over the 2L interleaved columns of w^2.
  std::vector<NodeId> powers;
  for (int j = 1; j <= J + 1; ++j)
    powers.push_back(tape.scale(tape.mean(tape.square(out.layer1[j - 1]), Axis::Cols), 2.0));
  out.power = tape.concat_cols(powers);
  return out;
}

ScatNodes scattering_placeholders(Tape& tape, std::size_t rows, std::size_t length, const ScatCovLayout& layout,
                                  bool differentiable) {
  auto make = [&](Shape s, const std::string& name) {
    return differentiable ? tape.leaf(s, name) : tape.input(s, name);
  };
  const int J = layout.octaves();
  ScatNodes out;
  out.rows = rows;
  for (int j = 1; j <= J + 1; ++j) out.layer1.push_back(make({rows, 2 * length}, "layer1"));
  for (std::size_t s = 0; s < layout.layer2_index().size(); ++s)
    out.layer2.push_back(make({rows, 2 * length}, "layer2"));
  for (int j = 1; j <= J; ++j) out.mean_modulus.push_back(make({rows, 1}, "mean_modulus"));
  out.power = make({rows, static_cast<std::size_t>(J) + 1}, "power");
  return out;
}

std::vector<NodeId> scattering_node_list(const ScatNodes& nodes) {
  std::vector<NodeId> out(nodes.layer1);
  out.insert(out.end(), nodes.layer2.begin(), nodes.layer2.end());
  out.insert(out.end(), nodes.mean_modulus.begin(), nodes.mean_modulus.end());
  out.push_back(nodes.power);
  return out;
}

NodeId record_covariance(Tape& tape, const ScatNodes& x, const ScatNodes& y, const ScatCovLayout& layout) {
  if (x.rows != y.rows && x.rows != 1 && y.rows != 1)
    throw SizingError("cross covariance needs equal row counts or a single broadcast row");
  const int J = layout.octaves();
  const bool same = x.power == y.power;

  const NodeId one = tape.scalar(1.0);
  const NodeId rx = tape.sqrt(tape.safe_div(one, x.power, kPowerEpsilon));
  const NodeId ry = same ? rx : tape.sqrt(tape.safe_div(one, y.power, kPowerEpsilon));

  std::map<std::pair<int, int>, NodeId> norm_cache;
  auto norm = [&](int j, int jp) {
    auto key = std::make_pair(j, jp);
    if (auto it = norm_cache.find(key); it != norm_cache.end()) return it->second;
    NodeId n = tape.mul(tape.slice_cols(rx, static_cast<std::size_t>(j - 1), 1),
                        tape.slice_cols(ry, static_cast<std::size_t>(jp - 1), 1));
    norm_cache.emplace(key, n);
    return n;
  };
  std::map<std::int32_t, NodeId> mean_cache;
  auto cmean = [&](NodeId a) {
    if (auto it = mean_cache.find(a.index); it != mean_cache.end()) return it->second;
    NodeId m = tape.complex_mean(a);
    mean_cache.emplace(a.index, m);
    return m;
  };
  auto cov = [&](NodeId a, NodeId b) {
    return tape.sub(tape.cinner(a, b), tape.cmul(cmean(a), cmean(b), true));
  };

  // Raw pieces: psi1 entries are one column, everything else two.
  std::vector<NodeId> pieces;
  std::vector<std::size_t> raw_pos;
  std::size_t col = 0;
  auto push = [&](NodeId n, std::size_t width) {
    pieces.push_back(n);
    raw_pos.push_back(col);
    col += width;
  };
  for (int j = 1; j <= J; ++j)
    push(tape.mul(tape.mul(x.mean_modulus[j - 1], y.mean_modulus[j - 1]), norm(j, j)), 1);
  for (int j = 1; j <= J + 1; ++j)
    push(tape.cinner(x.layer1[j - 1], y.layer1[j - 1]), 2);
  for (const auto& [j, jp] : layout.psi3_index()) {
    const NodeId c = cov(x.layer1[j - 1], y.layer2[layout.layer2_slot(jp, j)]);
    push(tape.mul(c, norm(j, jp)), 2);
  }
  for (const auto& t : layout.psi4_index()) {
    const NodeId c = cov(x.layer2[layout.layer2_slot(t[0], t[2])], y.layer2[layout.layer2_slot(t[1], t[2])]);
    push(tape.mul(c, norm(t[0], t[1])), 2);
  }
  const NodeId raw = tape.concat_cols(pieces);
  const std::size_t width = col;

  // Map raw columns to the flat layout.
  std::vector<std::size_t> src(layout.flat_length());
  std::size_t piece = 0;
  for (int j = 1; j <= J; ++j) src[layout.off_psi1() + j - 1] = raw_pos[piece++];
  for (int j = 1; j <= J + 1; ++j) src[layout.off_psi2() + j - 1] = raw_pos[piece++];
  for (std::size_t p = 0; p < layout.n_psi3(); ++p, ++piece) {
    src[layout.off_re3() + p] = raw_pos[piece];
    src[layout.off_im3() + p] = raw_pos[piece] + 1;
  }
  for (std::size_t q = 0; q < layout.n_psi4(); ++q, ++piece) {
    src[layout.off_re4() + q] = raw_pos[piece];
    if (layout.im4_position(q) != ScatCovLayout::npos) src[layout.im4_position(q)] = raw_pos[piece] + 1;
  }
  const std::size_t rows = tape.shape(raw).rows;
  const std::size_t F = layout.flat_length();
  std::vector<std::size_t> index(rows * F);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t f = 0; f < F; ++f) index[r * F + f] = r * width + src[f];
  return tape.gather(raw, std::move(index), {rows, F});
}

// ---- caches and engines ----------------------------------------------------

std::shared_ptr<const FilterBank> cached_bank(int octaves, std::size_t length, WaveletFamily family) {
  static std::mutex mutex;
  static std::map<std::tuple<int, std::size_t, std::uint32_t>, std::shared_ptr<const FilterBank>> cache;
  const auto key = std::make_tuple(octaves, length, static_cast<std::uint32_t>(family));
  {
    std::lock_guard lock(mutex);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  auto bank = std::make_shared<const FilterBank>(build_filterbank(octaves, length, family));
  std::lock_guard lock(mutex);
  return cache.emplace(key, std::move(bank)).first->second;
}

ScatCovEngine::ScatCovEngine(std::shared_ptr<const FilterBank> bank, std::size_t tiles, bool cross,
                             std::size_t y_tiles)
    : bank_(std::move(bank)), layout_(bank_->octaves()), tiles_(tiles), cross_(cross) {
  if (tiles == 0) throw SizingError("scattering covariance needs at least one tile");
  const std::size_t L = bank_->length();
  x_ = tape_.input({tiles, L}, "x");
  const ScatNodes sx = record_scattering(tape_, x_, *bank_, layout_);
  if (cross) {
    if (y_tiles == 0) y_tiles = tiles;
    if (y_tiles != tiles && y_tiles != 1) throw SizingError("second signal must have 1 or `tiles` rows");
    y_ = tape_.input({y_tiles, L}, "y");
    const ScatNodes sy = record_scattering(tape_, y_, *bank_, layout_);
    out_ = record_covariance(tape_, sx, sy, layout_);
  } else {
    out_ = record_covariance(tape_, sx, sx, layout_);
  }
}

std::vector<double> ScatCovEngine::compute(std::span<const double> x) {
  if (cross_) throw InvalidArgument("cross-covariance engine needs two signals");
  tape_.bind(x_, x);
  tape_.forward();
  const auto v = tape_.value(out_);
  return {v.begin(), v.end()};
}

std::vector<double> ScatCovEngine::compute(std::span<const double> x, std::span<const double> y) {
  if (!cross_) throw InvalidArgument("single-signal engine takes one signal");
  tape_.bind(x_, x);
  tape_.bind(y_, y);
  tape_.forward();
  const auto v = tape_.value(out_);
  return {v.begin(), v.end()};
}

namespace {

ScatCovEngine& thread_engine(const FilterBank& bank, std::size_t tiles, bool cross) {
  thread_local std::map<std::tuple<int, std::size_t, std::uint32_t, std::size_t, bool>,
                        std::unique_ptr<ScatCovEngine>>
      engines;
  const auto key = std::make_tuple(bank.octaves(), bank.length(), static_cast<std::uint32_t>(bank.family()),
                                   tiles, cross);
  auto it = engines.find(key);
  if (it == engines.end() || !(it->second->bank() == bank)) {
    auto shared = cached_bank(bank.octaves(), bank.length(), bank.family());
    // A caller-supplied bank may differ from the cached default (other options).
    if (!(*shared == bank)) shared = std::make_shared<const FilterBank>(bank);
    it = engines.insert_or_assign(key, std::make_unique<ScatCovEngine>(shared, tiles, cross)).first;
  }
  return *it->second;
}

void check_tiling(std::size_t n, const FilterBank& bank, std::size_t window) {
  if (window != bank.length())
    throw SizingError("window " + std::to_string(window) + " does not match bank length " +
                      std::to_string(bank.length()));
  if (window < (std::size_t{1} << bank.octaves())) throw SizingError("window is shorter than 2^J");
  if (n == 0 || n % window != 0)
    throw SizingError("signal length " + std::to_string(n) + " is not a positive multiple of the window " +
                      std::to_string(window));
}

std::vector<ScatCovVector> split_rows(const std::vector<double>& rows, int octaves, std::size_t F) {
  std::vector<ScatCovVector> out;
  for (std::size_t r = 0; r * F < rows.size(); ++r)
    out.push_back(ScatCovVector::from_flat(octaves, std::span<const double>(rows.data() + r * F, F)));
  return out;
}

}  // namespace

ScatteringCoeffs compute_scattering(std::span<const double> x, const FilterBank& bank) {
  const auto w = wavelet_transform(x, bank);
  const ScatCovLayout layout(bank.octaves());
  const std::size_t L = bank.length();
  ScatteringCoeffs out{bank.octaves(), L, w.coeffs, {}};
  std::vector<std::vector<double>> env_spectra;
  std::vector<double> envelope(L);
  for (int j = 1; j <= bank.octaves(); ++j) {
    const auto& row = w.coeffs[j - 1];
    for (std::size_t t = 0; t < L; ++t) envelope[t] = std::hypot(row[2 * t], row[2 * t + 1]);
    std::vector<double> spec(2 * L);
    fft::forward_real(envelope, spec);
    env_spectra.push_back(std::move(spec));
  }
  std::vector<double> product(2 * L);
  for (const auto& [j1, j2] : layout.layer2_index()) {
    const auto filter = bank.spectrum(j2);
    const auto& spec = env_spectra[j1 - 1];
    for (std::size_t k = 0; k < L; ++k) {
      product[2 * k] = spec[2 * k] * filter[k];
      product[2 * k + 1] = spec[2 * k + 1] * filter[k];
    }
    std::vector<double> row(2 * L);
    fft::inverse(product, row, L);
    out.layer2.push_back(std::move(row));
  }
  return out;
}

std::vector<ScatCovVector> compute_scatcov(std::span<const double> x, const FilterBank& bank, std::size_t window) {
  check_tiling(x.size(), bank, window);
  auto& engine = thread_engine(bank, x.size() / window, false);
  return split_rows(engine.compute(x), bank.octaves(), engine.layout().flat_length());
}

std::vector<ScatCovVector> compute_cross_scatcov(std::span<const double> x, std::span<const double> y,
                                                 const FilterBank& bank, std::size_t window) {
  check_tiling(x.size(), bank, window);
  if (y.size() != x.size()) throw SizingError("cross covariance signals differ in length");
  auto& engine = thread_engine(bank, x.size() / window, true);
  return split_rows(engine.compute(x, y), bank.octaves(), engine.layout().flat_length());
}

std::vector<double> average_tiles(std::span<const double> rows, std::size_t width) {
  if (width == 0 || rows.size() % width != 0) throw SizingError("tile matrix is not a multiple of its width");
  const std::size_t n = rows.size() / width;
  std::vector<double> out(width, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t f = 0; f < width; ++f) out[f] += rows[r * width + f];
  for (auto& v : out) v /= static_cast<double>(n);
  return out;
}

int octaves_for_window(int requested, std::size_t window) {
  if (window < 4 || !std::has_single_bit(window)) throw SizingError("window sizes must be powers of two >= 4");
  const int cap = std::bit_width(window) - 2;  // log2(w) - 1
  return std::min(requested, cap);
}

void check_pyramid(std::span<const std::size_t> window_sizes) {
  if (window_sizes.empty()) throw SizingError("at least one window size is required");
  for (std::size_t k = 0; k < window_sizes.size(); ++k) {
    octaves_for_window(1, window_sizes[k]);
    if (k > 0 && window_sizes[k] != 4 * window_sizes[k - 1])
      throw SizingError("window sizes must grow by exactly a factor of 4");
  }
}

PyramidalFeatures compute_pyramidal(std::span<const double> x, std::span<const std::size_t> window_sizes,
                                    const PyramidOptions& options) {
  check_pyramid(window_sizes);
  if (x.size() < window_sizes.back())
    throw SizingError("stream of " + std::to_string(x.size()) + " samples is shorter than the largest window " +
                      std::to_string(window_sizes.back()));
  PyramidalFeatures out;
  out.window_sizes.assign(window_sizes.begin(), window_sizes.end());
  for (std::size_t w : window_sizes) {
    const auto bank = cached_bank(octaves_for_window(options.octaves, w), w, options.family);
    auto& engine = thread_engine(*bank, 1, false);
    out.u.push_back(engine.compute(x.subspan(x.size() - w, w)));
  }
  return out;
}

std::vector<ReducedRow> plot_reduce(const ScatCovVector& v) {
  const ScatCovLayout layout(v.octaves);
  if (v.psi3.size() != layout.n_psi3() || v.psi4.size() != layout.n_psi4())
    throw SizingError("vector blocks do not match J");
  std::map<int, ReducedRow> psi3;
  for (std::size_t p = 0; p < layout.n_psi3(); ++p) {
    const auto [j, jp] = layout.psi3_index()[p];
    auto& row = psi3[j - jp];
    row.block = "psi3";
    row.lag_a = j - jp;
    row.value += v.psi3[p];
    ++row.count;
  }
  std::map<std::pair<int, int>, ReducedRow> psi4;
  for (std::size_t q = 0; q < layout.n_psi4(); ++q) {
    const auto& t = layout.psi4_index()[q];
    auto& row = psi4[{t[1] - t[0], t[2] - t[0]}];
    row.block = "psi4";
    row.lag_a = t[1] - t[0];
    row.lag_b = t[2] - t[0];
    row.value += v.psi4[q];
    ++row.count;
  }
  std::vector<ReducedRow> out;
  for (auto& [lag, row] : psi3) {
    row.value /= static_cast<double>(row.count);
    out.push_back(row);
  }
  for (auto& [lag, row] : psi4) {
    row.value /= static_cast<double>(row.count);
    out.push_back(row);
  }
  return out;
}

}  // namespace scatsep
