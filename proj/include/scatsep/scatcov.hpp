#pragma once

#include <array>
#include <complex>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "scatsep/diffcore.hpp"
#include "scatsep/filterbank.hpp"

namespace scatsep {

/// Index structure of a scattering covariance vector for J octaves.
///
/// Channels run over 1..J+1 (J+1 is the low-pass). Blocks:
///   psi1[j]            j = 1..J                        real
///   psi2[j]            j = 1..J+1                      real
///   psi3[(j, j')]      1 <= j' < j <= J+1              complex
///   psi4[(j1, j1', j2)] 1 <= j1' <= j1 < j2 <= J+1      complex (real when j1 = j1')
/// The flat real layout is psi1 | psi2 | Re psi3 | Im psi3 | Re psi4 |
/// Im psi4 (off-diagonal entries only), each block in lexicographic order of
/// its index tuple.
class ScatCovLayout {
 public:
  static constexpr int kOrderingVersion = 1;

  explicit ScatCovLayout(int octaves);

  int octaves() const noexcept { return octaves_; }
  std::size_t n_psi1() const noexcept { return static_cast<std::size_t>(octaves_); }
  std::size_t n_psi2() const noexcept { return static_cast<std::size_t>(octaves_) + 1; }
  std::size_t n_psi3() const noexcept { return psi3_.size(); }
  std::size_t n_psi4() const noexcept { return psi4_.size(); }
  std::size_t n_psi4_diag() const noexcept { return n_diag_; }

  /// Entries counted as complex numbers (psi1 + psi2 + psi3 + psi4).
  std::size_t complex_count() const noexcept { return n_psi1() + n_psi2() + n_psi3() + n_psi4(); }
  std::size_t flat_length() const noexcept { return flat_length_; }

  /// (j, j') pairs of psi3, which are also the (j1, j2) = (j', j) layer-2 channels.
  const std::vector<std::pair<int, int>>& psi3_index() const noexcept { return psi3_; }
  /// (j1, j1', j2) triples of psi4.
  const std::vector<std::array<int, 3>>& psi4_index() const noexcept { return psi4_; }
  /// Layer-2 channels (j1, j2), j1 < j2 <= J+1, lexicographic.
  const std::vector<std::pair<int, int>>& layer2_index() const noexcept { return layer2_; }
  std::size_t layer2_slot(int j1, int j2) const;

  std::size_t off_psi1() const noexcept { return 0; }
  std::size_t off_psi2() const noexcept { return n_psi1(); }
  std::size_t off_re3() const noexcept { return off_psi2() + n_psi2(); }
  std::size_t off_im3() const noexcept { return off_re3() + n_psi3(); }
  std::size_t off_re4() const noexcept { return off_im3() + n_psi3(); }
  std::size_t off_im4() const noexcept { return off_re4() + n_psi4(); }
  /// Flat position of Im psi4[q], or npos for diagonal entries.
  std::size_t im4_position(std::size_t q) const noexcept { return im4_pos_[q]; }

  std::vector<std::string> labels() const;
  /// True for entries that are first-order products (the psi1 block).
  std::vector<bool> first_order_mask() const;

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  int octaves_;
  std::vector<std::pair<int, int>> psi3_;
  std::vector<std::pair<int, int>> layer2_;
  std::vector<std::array<int, 3>> psi4_;
  std::vector<std::size_t> im4_pos_;
  std::size_t n_diag_ = 0;
  std::size_t flat_length_ = 0;
};

struct ScatCovVector {
  int octaves = 0;
  std::vector<double> psi1;
  std::vector<double> psi2;
  std::vector<std::complex<double>> psi3;
  std::vector<std::complex<double>> psi4;

  std::vector<double> flat() const;
  static ScatCovVector from_flat(int octaves, std::span<const double> flat);
};

struct ScatteringCoeffs {
  int octaves = 0;
  std::size_t length = 0;
  /// layer1[j-1]: x * psi_j, interleaved complex, j = 1..J+1.
  std::vector<std::vector<double>> layer1;
  /// layer2[s]: |x * psi_j1| * psi_j2 for the layout's layer-2 slot s.
  std::vector<std::vector<double>> layer2;
};

/// Guard below which a channel power is treated as zero.
inline constexpr double kPowerEpsilon = 1e-24;

/// Nodes of a recorded two-layer scattering network over row tiles.
struct ScatNodes {
  std::size_t rows = 0;
  std::vector<diff::NodeId> layer1;        // (rows, 2L), j = 1..J+1
  std::vector<diff::NodeId> layer2;        // (rows, 2L), layout layer-2 order
  std::vector<diff::NodeId> mean_modulus;  // (rows, 1), j = 1..J
  diff::NodeId power;                      // (rows, J+1), Ave |x * psi_j|^2
};

/// Record the scattering network of the rows of `x` (rows x L).
ScatNodes record_scattering(diff::Tape& tape, diff::NodeId x, const FilterBank& bank,
                            const ScatCovLayout& layout);

/// Create bindable nodes with the shapes of a scattering record, so a
/// covariance can be recorded on a separate tape. Leaves are differentiable.
ScatNodes scattering_placeholders(diff::Tape& tape, std::size_t rows, std::size_t length,
                                  const ScatCovLayout& layout, bool differentiable);
/// All nodes of a record in a fixed order (layer1, layer2, mean_modulus, power).
std::vector<diff::NodeId> scattering_node_list(const ScatNodes& nodes);

/// Record the per-row cross scattering covariance of x against y; returns a
/// (rows, F) node with F = layout.flat_length(). Row counts must match or one
/// side must have a single row, which is broadcast. Passing the same record
/// twice yields the scattering covariance of a single signal.
diff::NodeId record_covariance(diff::Tape& tape, const ScatNodes& x, const ScatNodes& y,
                               const ScatCovLayout& layout);

/// Shared per-(J, L, family) filter bank cache.
std::shared_ptr<const FilterBank> cached_bank(int octaves, std::size_t length, WaveletFamily family);

/// Forward-only evaluator that records its graph once and replays it.
/// Not thread-safe; use one instance per worker.
class ScatCovEngine {
 public:
  /// `tiles` rows of bank.length() samples. In cross mode `y_tiles` is the
  /// number of rows of the second signal (tiles or 1).
  ScatCovEngine(std::shared_ptr<const FilterBank> bank, std::size_t tiles, bool cross = false,
                std::size_t y_tiles = 0);

  /// Per-tile flat vectors, row-major (tiles x F).
  std::vector<double> compute(std::span<const double> x);
  std::vector<double> compute(std::span<const double> x, std::span<const double> y);

  const ScatCovLayout& layout() const noexcept { return layout_; }
  const FilterBank& bank() const noexcept { return *bank_; }
  std::size_t tiles() const noexcept { return tiles_; }

 private:
  std::shared_ptr<const FilterBank> bank_;
  ScatCovLayout layout_;
  std::size_t tiles_;
  bool cross_;
  diff::Tape tape_;
  diff::NodeId x_, y_, out_;
};

/// Direct (non-tape) two-layer scattering of one signal.
ScatteringCoeffs compute_scattering(std::span<const double> x, const FilterBank& bank);

/// Scattering covariance of every disjoint tile of `x`; bank.length() must
/// equal `window`.
std::vector<ScatCovVector> compute_scatcov(std::span<const double> x, const FilterBank& bank,
                                           std::size_t window);

/// Cross scattering covariance Psi(x, y) per tile.
std::vector<ScatCovVector> compute_cross_scatcov(std::span<const double> x, std::span<const double> y,
                                                 const FilterBank& bank, std::size_t window);

/// Element-wise mean of per-tile flat vectors (tiles x F, row-major).
std::vector<double> average_tiles(std::span<const double> rows, std::size_t width);

struct PyramidalFeatures {
  std::vector<std::size_t> window_sizes;
  std::vector<std::vector<double>> u;
};

struct PyramidOptions {
  int octaves = 7;
  WaveletFamily family = WaveletFamily::BattleLemarie;
};

/// Octave count used at a scale: min(requested, log2(w) - 1).
int octaves_for_window(int requested, std::size_t window);

/// Validate a factor-4 pyramid of window sizes.
void check_pyramid(std::span<const std::size_t> window_sizes);

/// Features of the trailing w_k samples of `x` for every scale k.
PyramidalFeatures compute_pyramidal(std::span<const double> x, std::span<const std::size_t> window_sizes,
                                    const PyramidOptions& options = {});

struct ReducedRow {
  std::string block;  // "psi3" or "psi4"
  int lag_a = 0;      // psi3: j - j'; psi4: j1' - j1
  int lag_b = 0;      // psi4: j2 - j1
  std::complex<double> value;
  std::size_t count = 0;
};

/// Average psi3 over constant j - j' and psi4 over constant (j1' - j1, j2 - j1).
std::vector<ReducedRow> plot_reduce(const ScatCovVector& v);

}  // namespace scatsep
