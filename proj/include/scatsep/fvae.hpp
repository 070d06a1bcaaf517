#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "scatsep/diffcore.hpp"
#include "scatsep/storage.hpp"

namespace scatsep {

/// Log-variances of every Gaussian in the model are clamped to this range.
inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

struct FvaeConfig {
  std::vector<std::size_t> d_in;      // feature width per scale
  std::vector<std::size_t> clusters;  // mixture components per scale
  std::size_t hidden = 1024;
  std::size_t latent = 32;
  std::size_t n_joint_blocks = 4;
  double lr = 1e-3;
  std::size_t epochs = 1000;
  std::size_t batch = 16384;
  double tau0 = 1.0;
  double tau_min = 0.5;
  double tau_decay = 3e-3;
  double leaky_slope = 0.01;
  double bn_momentum = 0.9;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;

  std::size_t scales() const noexcept { return d_in.size(); }
  std::size_t input_width() const noexcept;
  /// max(tau_min, tau0 exp(-tau_decay epoch)).
  double tau_at(std::size_t epoch) const;
  void validate() const;

  Json to_json() const;
  static FvaeConfig from_json(const Json& j);
};

struct Param {
  std::string name;
  diff::Shape shape;
  std::vector<double> value;
};

/// Generative and inference parameters of the factorial GMM-VAE.
///
/// Joint encoder: input layer and `n_joint_blocks` residual blocks, each
/// affine -> batchnorm -> LeakyReLU, over the concatenated standardized
/// features of all scales. Per scale i: a feature layer, a mixture-logits
/// head, and a z-head fed with the features and a (relaxed) one-hot y. The
/// decoder of scale i reads only z_i. GMM tables prior<i>.mu / prior<i>.logvar
/// hold one learnable row per component.
struct FvaeModel {
  FvaeConfig config;
  std::vector<Param> params;
  /// Batchnorm running statistics (not trained by gradient).
  std::vector<Param> buffers;
  /// Per-scale feature standardization, applied before encoding.
  std::vector<std::vector<double>> feat_mean;
  std::vector<std::vector<double>> feat_std;
  bool standardized = false;
  std::size_t step = 0;
  std::size_t epoch = 0;

  Param& param(const std::string& name);
  const Param& param(const std::string& name) const;
  Param& buffer(const std::string& name);
  std::size_t parameter_count() const;
  std::vector<double> flat_params() const;
  void set_flat_params(std::span<const double> flat);
};

/// Per-scale feature rows: u[i] is rows x d_in[i], row-major.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::vector<std::vector<double>> u;

  std::size_t scales() const noexcept { return u.size(); }
  FeatureMatrix subset(std::span<const std::size_t> idx) const;
};

FvaeModel init_model(const FvaeConfig& config, std::mt19937_64& rng);
/// Seeds the generator from config.seed.
FvaeModel init_model(const FvaeConfig& config);

/// Frozen noise of one ELBO evaluation: Gumbel(0, 1) draws (rows x c_i) and
/// standard normal draws (rows x latent) per scale.
struct ElboNoise {
  std::vector<std::vector<double>> gumbel;
  std::vector<std::vector<double>> eps;
};

ElboNoise draw_noise(const FvaeConfig& config, std::size_t rows, std::mt19937_64& rng);

/// Batch means of the per-scale terms; total sums all scales and terms.
struct ElboTerms {
  std::vector<double> recon;
  std::vector<double> kl_cat;
  std::vector<double> kl_gauss;
  double total = 0.0;
};

enum class BatchNormMode { Train, Eval };

/// ELBO terms of a batch of raw features (standardized internally) with the
/// given noise. When `grad` is non-empty it receives d total / d params in
/// flat_params() order.
ElboTerms elbo_terms(const FvaeModel& model, const FeatureMatrix& batch, double tau, const ElboNoise& noise,
                     std::span<double> grad = {}, BatchNormMode mode = BatchNormMode::Train);
/// Draws the noise from `rng`.
ElboTerms elbo_terms(const FvaeModel& model, const FeatureMatrix& batch, double tau, std::mt19937_64& rng,
                     BatchNormMode mode = BatchNormMode::Train);

/// Records the ELBO of `model` on `tape` for a fixed batch, with the flat
/// parameters as the differentiable `point`; used for gradient checks.
diff::NodeId record_elbo(diff::Tape& tape, diff::NodeId point, const FvaeModel& model, const FeatureMatrix& batch,
                         double tau, const ElboNoise& noise, BatchNormMode mode = BatchNormMode::Train);

/// Relaxed one-hot sample softmax((logits + gumbel) / tau), row-wise.
std::vector<double> gumbel_softmax(std::span<const double> logits, std::span<const double> gumbel, std::size_t width,
                                   double tau);

struct EpochStats {
  std::size_t epoch = 0;
  double tau = 0.0;
  double train_total = 0.0;
  double recon = 0.0;
  double kl_cat = 0.0;
  double kl_gauss = 0.0;
  /// NaN when no validation rows are held out.
  double val_total = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> val_rows;
};

using EpochMonitor = std::function<void(const EpochStats&)>;

/// Adam on the ELBO with the configured schedule. Standardization is fitted
/// on the training split when the model has none yet.
TrainHistory train(FvaeModel& model, const FeatureMatrix& features, const EpochMonitor& monitor = {});

struct ClusterAssignment {
  std::vector<double> end_time;
  /// probs[i] is rows x c_i.
  std::vector<std::vector<double>> probs;
  std::vector<std::vector<int>> labels;
  std::vector<std::vector<double>> confidence;
};

/// Eval-mode mixture probabilities; deterministic.
ClusterAssignment assign_clusters(const FvaeModel& model, const FeatureMatrix& u,
                                  std::span<const double> end_times = {});

/// Mean decoding of scale `scale` for latent rows z (rows x latent), in
/// standardized feature units.
std::vector<double> decode(const FvaeModel& model, std::size_t scale, std::span<const double> z);

/// n feature vectors (n x d_in[scale]) of cluster y, in raw feature units.
std::vector<double> sample_cluster_representation(const FvaeModel& model, std::size_t scale, std::size_t cluster,
                                                  std::size_t n, std::mt19937_64& rng);

void save_checkpoint(const FvaeModel& model, const std::filesystem::path& path);
FvaeModel load_checkpoint(const std::filesystem::path& path);

}  // namespace scatsep
