#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace scatsep {

enum class EventKind { SymPulse, AsymPulse, MediumEvent };

std::string to_string(EventKind kind);
EventKind event_kind_from_string(const std::string& name);

struct SynthEvent {
  EventKind kind = EventKind::SymPulse;
  /// First sample of the support. Asymmetric pulses peak here; symmetric
  /// pulses peak at start + (length - 1) / 2.
  std::size_t start = 0;
  std::size_t length = 0;
  double amplitude = 1.0;
  /// Seed of the burst waveform (medium events only).
  std::uint64_t seed = 0;
};

struct SynthConfig {
  std::size_t w_large = 4096;
  std::size_t w_medium = 1024;
  std::size_t w_fine = 256;
  std::size_t n_days = 8;
  std::size_t eta = 512;
  /// Target RMS of each component over the whole series.
  double amp_large = 1.0;
  double amp_medium = 1.0;
  double amp_fine = 1.0;
  double lambda2 = 0.05;
  /// Integral scale of the cascade; 0 selects one day (2 * w_large).
  std::size_t mrw_integral_scale = 0;
  /// Pulse decay in samples; 0 selects w_fine / 16.
  double tau_p = 0.0;
  /// Pass band of the medium bursts in cycles per sample.
  double burst_low = 1.0 / 32.0;
  double burst_high = 1.0 / 8.0;
  std::uint64_t seed = 0;

  std::size_t day_length() const noexcept { return 2 * w_large; }
  std::size_t n_samples() const noexcept { return n_days * day_length(); }
  double pulse_tau() const noexcept { return tau_p > 0.0 ? tau_p : static_cast<double>(w_fine) / 16.0; }
  void validate() const;
};

struct SynthDataset {
  SynthConfig config;
  std::vector<double> x;
  std::vector<double> large;
  std::vector<double> medium;
  std::vector<double> fine;
  std::vector<double> gate;
  /// Sorted by start, then kind.
  std::vector<SynthEvent> events;
};

/// 2w-periodic gate: 0 on [0, w], raised-cosine rise on [w, w + eta], 1 on
/// [w + eta, 2w - eta], raised-cosine fall on [2w - eta, 2w].
std::vector<double> gen_gate(std::size_t n_samples, std::size_t w, std::size_t eta);

/// Multifractal random walk increments: Gaussian noise times exp(omega) with
/// omega a log-correlated Gaussian field (circulant embedding), normalized to
/// unit sample variance. integral_scale 0 uses n_samples.
std::vector<double> gen_mrw(std::size_t n_samples, double lambda2, std::uint64_t seed,
                            std::size_t integral_scale = 0);

/// Log-correlated field omega with Var = lambda2 ln(T) and mean -Var, so that
/// E exp(2 omega) = 1.
std::vector<double> gen_log_correlated(std::size_t n_samples, double lambda2, std::size_t integral_scale,
                                       std::mt19937_64& rng);

struct EventTrain {
  std::vector<double> signal;
  std::vector<SynthEvent> events;
};

/// Place `count` events of one kind with the given amplitude. Medium events do
/// not overlap; pulses may. Throws when placement fails after bounded retries.
EventTrain gen_events(EventKind kind, std::size_t n_samples, std::size_t count, std::size_t w, std::mt19937_64& rng,
                      const SynthConfig& config, double amplitude = 1.0);

/// Waveform of one event (length event.length).
std::vector<double> render_event(const SynthEvent& event, const SynthConfig& config);
/// Sum of the rendered events of the given kinds over n samples.
std::vector<double> render_events(const std::vector<SynthEvent>& events, std::size_t n_samples,
                                  const SynthConfig& config, bool medium, bool fine);

SynthDataset compose_dataset(const SynthConfig& config);

enum class WindowLabel { Background = 0, Pulse = 1, Medium = 2 };

/// Ground truth for the window [end - w, end): Medium when it overlaps a
/// medium event, else Pulse when a pulse peak lies inside, else Background.
WindowLabel window_label(const SynthDataset& data, std::size_t end, std::size_t w);

}  // namespace scatsep
