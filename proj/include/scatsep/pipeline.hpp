#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scatsep/fvae.hpp"
#include "scatsep/scatcov.hpp"
#include "scatsep/sourcesep.hpp"
#include "scatsep/storage.hpp"
#include "scatsep/synthgen.hpp"

namespace scatsep {

/// One pyramid of right-aligned windows: windows[k] covers
/// [end - window_sizes[k], end).
struct WindowStack {
  std::size_t end = 0;
  std::vector<std::span<const double>> windows;
};

/// Stacks at end = w_K, w_K + hop, ... while end <= n.
class WindowStream {
 public:
  WindowStream(std::span<const double> samples, std::vector<std::size_t> window_sizes, std::size_t hop);

  std::size_t size() const noexcept { return count_; }
  std::size_t end_of(std::size_t k) const noexcept { return window_sizes_.back() + k * hop_; }
  WindowStack operator[](std::size_t k) const;

  class iterator {
   public:
    using iterator_category = std::input_iterator_tag;
    using value_type = WindowStack;
    using difference_type = std::ptrdiff_t;
    iterator(const WindowStream* s, std::size_t k) : s_(s), k_(k) {}
    WindowStack operator*() const { return (*s_)[k_]; }
    iterator& operator++() {
      ++k_;
      return *this;
    }
    bool operator==(const iterator& o) const { return k_ == o.k_; }

   private:
    const WindowStream* s_;
    std::size_t k_;
  };
  iterator begin() const { return {this, 0}; }
  iterator end() const { return {this, count_}; }

 private:
  std::span<const double> samples_;
  std::vector<std::size_t> window_sizes_;
  std::size_t hop_;
  std::size_t count_ = 0;
};

WindowStream window_stream(const SignalStore& store, std::vector<std::size_t> window_sizes, std::size_t hop);

struct FeaturizeOptions {
  std::vector<std::size_t> window_sizes;
  /// 0 selects window_sizes.front().
  std::size_t hop = 0;
  int octaves = 7;
  WaveletFamily family = WaveletFamily::BattleLemarie;
  /// 0 selects default_workers().
  std::size_t workers = 0;
};

struct FeatureStore {
  std::vector<std::size_t> window_sizes;
  std::vector<int> octaves;
  std::size_t hop = 0;
  double sample_rate = 1.0;
  double start_time = 0.0;
  /// Exclusive end sample of each stack and its timestamp in seconds.
  std::vector<std::size_t> end_index;
  std::vector<double> end_time;
  FeatureMatrix features;
};

FeatureStore featurize(const SignalStore& store, const FeaturizeOptions& options);
void save_features(const FeatureStore& f, const std::filesystem::path& path);
FeatureStore load_features(const std::filesystem::path& path);

/// Window sizes derived from a synthetic configuration: w_fine, w_medium,
/// w_large when they form a factor-4 pyramid.
std::vector<std::size_t> synth_window_sizes(const SynthConfig& c);

Json to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const Json& j);

/// Writes mixture and components as signals, the event log and the config.
/// One synthetic day maps to 24 hours of timestamps.
void write_dataset(const std::filesystem::path& dir, const SynthDataset& d);
SynthDataset read_dataset(const std::filesystem::path& dir);
double synth_sample_rate(const SynthConfig& c);

/// Ground-truth labels of the windows [end - w, end) of a synthetic dataset.
std::vector<int> window_labels(const SynthDataset& d, std::span<const std::size_t> end_index, std::size_t w);

void save_assignments(const ClusterAssignment& a, const std::vector<std::size_t>& clusters,
                      const std::filesystem::path& path);
ClusterAssignment load_assignments(const std::filesystem::path& path, std::vector<std::size_t>* clusters = nullptr);
std::string assignments_csv(const ClusterAssignment& a);

/// Counts of argmax labels per time-of-day bin; rows are bins, columns run
/// over (scale, cluster).
struct TimeHistogram {
  std::size_t bins = 0;
  std::vector<std::size_t> clusters;
  std::vector<std::vector<std::size_t>> counts;

  std::string to_csv() const;
};

TimeHistogram time_histogram(const ClusterAssignment& a, const std::vector<std::size_t>& clusters, std::size_t bins,
                             double day_seconds = 86400.0);

/// Medium-event recovery on a synthetic dataset: a target segment of
/// `tiles` windows holding one whole medium event, and prior snippets taken
/// from background windows.
struct SeparationScenario {
  std::size_t window = 0;
  std::size_t target_start = 0;
  std::vector<double> x;
  std::vector<double> medium;
  std::vector<std::vector<double>> snippets;
  std::vector<std::size_t> snippet_starts;
};

/// Background windows are those with gate 0 and no event; `tiles` * window
/// samples form the target.
SeparationScenario make_separation_scenario(const SynthDataset& d, std::size_t window, std::size_t tiles,
                                            std::size_t n_snippets);

/// Snippets of length `window` ending at the stacks assigned to `cluster` at
/// `scale`, skipping any that overlap [exclude_begin, exclude_end).
std::vector<std::vector<double>> cluster_snippets(std::span<const double> x, const FeatureStore& f,
                                                  const ClusterAssignment& a, std::size_t scale, int cluster,
                                                  std::size_t window, std::size_t n_snippets,
                                                  std::size_t exclude_begin = 0, std::size_t exclude_end = 0);

struct SeparationEval {
  double baseline_error = 0.0;  // ||x - medium|| / ||medium||
  double final_error = 0.0;     // ||residual - medium|| / ||medium||
  double improvement = 0.0;
  bool monotone = true;
  std::size_t iterations = 0;
  std::string status;
  SeparationResult result;

  Json to_json() const;
};

SeparationEval evaluate_separation(const SeparationScenario& s, int octaves, const SeparationConfig& config,
                                   const LbfgsMonitor& monitor = {});

/// Runs a CLI invocation (argv[0] is the program name). Errors are written to
/// `err` as a JSON object and give a nonzero status.
int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace scatsep
