#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "scatsep/diffcore.hpp"
#include "scatsep/filterbank.hpp"
#include "scatsep/lbfgs.hpp"
#include "scatsep/scatcov.hpp"

namespace scatsep {

/// How snippets fill the tiles of a long signal in the data and cross terms:
/// the same snippet in every tile, or snippets i, i+1, ... (mod N) in
/// consecutive tiles.
enum class SnippetPairing { Broadcast, Cyclic };

/// Per-coefficient variances across snippets, one vector per loss family.
struct Normalizers {
  std::vector<double> prior;  // sigma^2(Psi(s_i))
  std::vector<double> data;   // sigma^2(Psi(x + s_i))
  std::vector<double> cross;  // sigma^2(Psi(s_i, x))
};

/// Snippet statistics shared by the normalizers and the loss.
struct SnippetStats {
  std::vector<double> psi_x;                  // tile-averaged Psi(x), F
  std::vector<std::vector<double>> psi_s;     // Psi(s_i), N x F
  std::vector<std::vector<double>> psi_xs;    // tile-averaged Psi(x + s_i)
  std::vector<std::vector<double>> psi_sx;    // tile-averaged Psi(s_i, x_tile)
};

SnippetStats snippet_stats(std::span<const double> x, const std::vector<std::vector<double>>& snippets,
                           const FilterBank& bank, std::size_t window,
                           SnippetPairing pairing = SnippetPairing::Broadcast);

/// Variances across snippets; entries below floor_ratio * (median positive
/// entry) are raised to that floor. Needs at least two snippets.
Normalizers precompute_normalizers(std::span<const double> x, const std::vector<std::vector<double>>& snippets,
                                   const FilterBank& bank, std::size_t window, double floor_ratio = 1e-12,
                                   SnippetPairing pairing = SnippetPairing::Broadcast);
Normalizers normalizers_from_stats(const SnippetStats& stats, double floor_ratio = 1e-12);

struct LossTerms {
  double prior = 0.0;
  double data = 0.0;
  double cross = 0.0;
  double total() const noexcept { return prior + data + cross; }
};

struct SeparationOptions {
  double floor_ratio = 1e-12;
  /// Weight of the first-order cross block in the cross loss.
  double cross_first_order_weight = 0.0;
  SnippetPairing pairing = SnippetPairing::Broadcast;
  /// 0 selects default_workers().
  std::size_t workers = 0;
};

/// One-scale separation objective over a candidate source s1 of the mixture
/// length. Snippet terms are evaluated per worker and reduced in snippet order.
class SeparationProblem {
 public:
  /// Computes the normalizers from the snippets.
  SeparationProblem(std::vector<double> x, std::vector<std::vector<double>> snippets,
                    std::shared_ptr<const FilterBank> bank, const SeparationOptions& options = {});
  /// Uses the given normalizers as they are.
  SeparationProblem(std::vector<double> x, std::vector<std::vector<double>> snippets,
                    std::shared_ptr<const FilterBank> bank, Normalizers normalizers,
                    const SeparationOptions& options = {});
  ~SeparationProblem();
  SeparationProblem(const SeparationProblem&) = delete;
  SeparationProblem& operator=(const SeparationProblem&) = delete;

  /// Loss terms at s1; the gradient of the total is written to `grad` when
  /// it is non-empty.
  LossTerms evaluate(std::span<const double> s1, std::span<double> grad);

  const std::vector<double>& mixture() const noexcept { return x_; }
  std::size_t window() const noexcept { return bank_->length(); }
  std::size_t tiles() const noexcept { return x_.size() / bank_->length(); }
  std::size_t snippet_count() const noexcept { return snippets_.size(); }
  const Normalizers& normalizers() const noexcept { return norm_; }
  const SnippetStats& stats() const noexcept { return stats_; }
  const ScatCovLayout& layout() const noexcept { return layout_; }

 private:
  struct TopTape;
  struct WorkerTapes;

  void validate() const;
  void build();

  std::vector<double> x_;
  std::vector<std::vector<double>> snippets_;
  std::shared_ptr<const FilterBank> bank_;
  ScatCovLayout layout_;
  SeparationOptions options_;
  SnippetStats stats_;
  Normalizers norm_;
  std::vector<double> inv_prior_, inv_data_, cross_weight_;
  std::vector<std::vector<double>> scat_s_;  // scattering node values of each snippet
  std::vector<std::size_t> scat_offsets_;    // node offsets within one snippet's values
  std::unique_ptr<TopTape> top_;
  std::vector<std::unique_ptr<WorkerTapes>> workers_;
};

struct SeparationConfig {
  LbfgsConfig lbfgs{};
  SeparationOptions options{};
};

struct SeparationResult {
  std::vector<double> s1_hat;
  std::vector<double> residual;
  /// Accepted-step trajectory, entry 0 at s1 = x.
  std::vector<LbfgsStep> trajectory;
  LossTerms initial;
  LossTerms final_terms;
  std::size_t iterations = 0;
  LbfgsStatus status = LbfgsStatus::MaxIterations;
};

/// Minimize the separation loss from s1 = x.
SeparationResult separate(std::span<const double> x, const std::vector<std::vector<double>>& snippets,
                          std::shared_ptr<const FilterBank> bank, std::size_t window,
                          const SeparationConfig& config = {}, const LbfgsMonitor& monitor = {});

/// One scale of a multi-scale objective.
struct ScaleTerm {
  std::vector<std::vector<double>> snippets;
  std::shared_ptr<const FilterBank> bank;
};

/// Minimize the sum of the single-scale objectives, one per term.
SeparationResult separate_multiscale(std::span<const double> x, const std::vector<ScaleTerm>& scales,
                                     const SeparationConfig& config = {}, const LbfgsMonitor& monitor = {});

}  // namespace scatsep
