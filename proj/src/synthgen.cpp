#include "scatsep/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "scatsep/errors.hpp"
#include "scatsep/fft.hpp"

namespace scatsep {

namespace {

bool power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

double rms(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double a : v) s += a * a;
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::size_t peak_of(const SynthEvent& e) {
  return e.kind == EventKind::SymPulse ? e.start + (e.length - 1) / 2 : e.start;
}

}  // namespace

std::string to_string(EventKind kind) {
  switch (kind) {
    case EventKind::SymPulse: return "sym_pulse";
    case EventKind::AsymPulse: return "asym_pulse";
    case EventKind::MediumEvent: return "medium_event";
  }
  return "unknown";
}

EventKind event_kind_from_string(const std::string& name) {
  if (name == "sym_pulse") return EventKind::SymPulse;
  if (name == "asym_pulse") return EventKind::AsymPulse;
  if (name == "medium_event") return EventKind::MediumEvent;
  throw FormatError("unknown event kind '" + name + "'");
}

void SynthConfig::validate() const {
  if (!power_of_two(w_large) || !power_of_two(w_medium) || !power_of_two(w_fine))
    throw InvalidArgument("synthetic window widths must be powers of two");
  if (!(w_fine < w_medium && w_medium < w_large)) throw InvalidArgument("need w_fine < w_medium < w_large");
  if (4 * eta >= w_large) throw InvalidArgument("taper length eta must be below w_large / 4");
  if (n_days == 0) throw InvalidArgument("need at least one day");
  if (!(lambda2 > 0.0)) throw InvalidArgument("intermittency lambda^2 must be positive");
  if (amp_large < 0.0 || amp_medium < 0.0 || amp_fine < 0.0) throw InvalidArgument("amplitudes must be >= 0");
  if (!(burst_low > 0.0 && burst_low < burst_high && burst_high <= 0.5))
    throw InvalidArgument("burst band must satisfy 0 < low < high <= 0.5");
  if (tau_p < 0.0) throw InvalidArgument("pulse decay must be >= 0");
}

std::vector<double> gen_gate(std::size_t n_samples, std::size_t w, std::size_t eta) {
  if (w == 0 || 2 * eta >= w) throw InvalidArgument("gate taper eta must be below w / 2");
  std::vector<double> g(n_samples);
  const double e = static_cast<double>(eta);
  for (std::size_t t = 0; t < n_samples; ++t) {
    const std::size_t p = t % (2 * w);
    double v;
    if (p <= w) {
      v = 0.0;
    } else if (p < w + eta) {
      v = 0.5 * (1.0 - std::cos(std::numbers::pi * static_cast<double>(p - w) / e));
    } else if (p <= 2 * w - eta) {
      v = 1.0;
    } else {
      v = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(p - (2 * w - eta)) / e));
    }
    g[t] = v;
  }
  return g;
}

std::vector<double> gen_log_correlated(std::size_t n, double lambda2, std::size_t integral_scale,
                                       std::mt19937_64& rng) {
  if (n == 0) return {};
  const double T = static_cast<double>(integral_scale == 0 ? n : integral_scale);
  // Circulant embedding of c(k) = lambda2 ln(T / (k + 1)) for k < T.
  const std::size_t M = 2 * n;
  auto cov = [&](std::size_t k) {
    const double kk = static_cast<double>(k);
    return kk + 1.0 < T ? lambda2 * std::log(T / (kk + 1.0)) : 0.0;
  };
  std::vector<double> row(2 * M, 0.0), eig(2 * M);
  for (std::size_t k = 0; k < M; ++k) row[2 * k] = cov(std::min(k, M - k));
  fft::forward(row, eig, M);

  std::normal_distribution<double> nd;
  std::vector<double> z(2 * M), out(2 * M);
  for (std::size_t k = 0; k < M; ++k) {
    const double s = std::sqrt(std::max(eig[2 * k], 0.0) / static_cast<double>(M));
    z[2 * k] = s * nd(rng);
    z[2 * k + 1] = s * nd(rng);
  }
  fft::forward(z, out, M);
  const double mean = -cov(0);
  std::vector<double> omega(n);
  for (std::size_t t = 0; t < n; ++t) omega[t] = mean + out[2 * t];
  return omega;
}

std::vector<double> gen_mrw(std::size_t n_samples, double lambda2, std::uint64_t seed, std::size_t integral_scale) {
  if (!(lambda2 > 0.0)) throw InvalidArgument("intermittency lambda^2 must be positive");
  std::mt19937_64 rng(seed);
  const std::vector<double> omega = gen_log_correlated(n_samples, lambda2, integral_scale, rng);
  std::normal_distribution<double> nd;
  std::vector<double> x(n_samples);
  for (std::size_t t = 0; t < n_samples; ++t) x[t] = nd(rng) * std::exp(omega[t]);
  const double r = rms(x);
  if (r > 0.0)
    for (double& v : x) v /= r;
  return x;
}

std::vector<double> render_event(const SynthEvent& e, const SynthConfig& cfg) {
  std::vector<double> v(e.length, 0.0);
  const double tau = cfg.pulse_tau();
  switch (e.kind) {
    case EventKind::SymPulse: {
      const std::size_t c = (e.length - 1) / 2;
      for (std::size_t k = 0; k < e.length; ++k) {
        const double d = k >= c ? static_cast<double>(k - c) : static_cast<double>(c - k);
        v[k] = e.amplitude * std::exp(-d / tau);
      }
      break;
    }
    case EventKind::AsymPulse:
      for (std::size_t k = 0; k < e.length; ++k) v[k] = e.amplitude * std::exp(-static_cast<double>(k) / tau);
      break;
    case EventKind::MediumEvent: {
      // Band-pass Gaussian noise, modulated by an intermittent envelope and a
      // Hann taper, scaled to unit RMS before the amplitude.
      const std::size_t w = e.length;
      std::mt19937_64 rng(e.seed);
      std::normal_distribution<double> nd;
      std::vector<double> noise(2 * w, 0.0), spec(2 * w), back(2 * w);
      for (std::size_t k = 0; k < w; ++k) noise[2 * k] = nd(rng);
      fft::forward(noise, spec, w);
      for (std::size_t k = 0; k < w; ++k) {
        const double f = static_cast<double>(std::min(k, w - k)) / static_cast<double>(w);
        if (f < cfg.burst_low || f > cfg.burst_high) spec[2 * k] = spec[2 * k + 1] = 0.0;
      }
      fft::inverse(spec, back, w);
      const std::vector<double> omega = gen_log_correlated(w, cfg.lambda2, w, rng);
      double ss = 0.0;
      for (std::size_t k = 0; k < w; ++k) {
        const double hann = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * (static_cast<double>(k) + 0.5) /
                                                  static_cast<double>(w)));
        v[k] = back[2 * k] * std::exp(omega[k]) * hann;
        ss += v[k] * v[k];
      }
      const double scale = ss > 0.0 ? e.amplitude / std::sqrt(ss / static_cast<double>(w)) : 0.0;
      for (double& a : v) a *= scale;
      break;
    }
  }
  return v;
}

std::vector<double> render_events(const std::vector<SynthEvent>& events, std::size_t n_samples,
                                  const SynthConfig& config, bool medium, bool fine) {
  std::vector<double> out(n_samples, 0.0);
  for (const SynthEvent& e : events) {
    const bool is_medium = e.kind == EventKind::MediumEvent;
    if ((is_medium && !medium) || (!is_medium && !fine)) continue;
    if (e.start + e.length > n_samples) throw SizingError("event extends past the end of the series");
    const std::vector<double> v = render_event(e, config);
    for (std::size_t k = 0; k < e.length; ++k) out[e.start + k] += v[k];
  }
  return out;
}

EventTrain gen_events(EventKind kind, std::size_t n_samples, std::size_t count, std::size_t w, std::mt19937_64& rng,
                      const SynthConfig& config, double amplitude) {
  if (w < 2) throw InvalidArgument("event width must be at least 2");
  if (count * w >= n_samples && count > 0)
    throw SizingError(std::to_string(count) + " events of width " + std::to_string(w) + " do not fit in " +
                      std::to_string(n_samples) + " samples");
  const std::size_t length = kind == EventKind::SymPulse ? w - 1 : w;
  std::uniform_int_distribution<std::size_t> pos(0, n_samples - length);
  EventTrain out;
  std::vector<std::pair<std::size_t, std::size_t>> taken;
  constexpr int kRetries = 10000;
  for (std::size_t i = 0; i < count; ++i) {
    SynthEvent e;
    e.kind = kind;
    e.length = length;
    e.amplitude = amplitude;
    bool placed = false;
    for (int attempt = 0; attempt < kRetries && !placed; ++attempt) {
      e.start = pos(rng);
      if (kind != EventKind::MediumEvent) {
        placed = true;
        break;
      }
      placed = std::none_of(taken.begin(), taken.end(), [&](const auto& iv) {
        return e.start < iv.second && iv.first < e.start + length;
      });
    }
    if (!placed) throw SizingError("could not place non-overlapping events after bounded retries");
    if (kind == EventKind::MediumEvent) {
      e.seed = rng();
      taken.emplace_back(e.start, e.start + length);
    }
    out.events.push_back(e);
  }
  std::sort(out.events.begin(), out.events.end(), [](const SynthEvent& a, const SynthEvent& b) {
    return a.start < b.start;
  });
  out.signal = render_events(out.events, n_samples, config, true, true);
  return out;
}

SynthDataset compose_dataset(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.n_samples();
  std::mt19937_64 master(cfg.seed);
  const std::uint64_t seed_white = master(), seed_mrw = master(), seed_medium = master(), seed_sym = master(),
                      seed_asym = master();

  SynthDataset d;
  d.config = cfg;
  d.gate = gen_gate(n, cfg.w_large, cfg.eta);

  std::vector<double> white(n);
  {
    std::mt19937_64 rng(seed_white);
    std::normal_distribution<double> nd;
    for (double& v : white) v = nd(rng);
  }
  const std::size_t T = cfg.mrw_integral_scale ? cfg.mrw_integral_scale : cfg.day_length();
  const std::vector<double> mrw = gen_mrw(n, cfg.lambda2, seed_mrw, T);
  d.large.resize(n);
  for (std::size_t t = 0; t < n; ++t) d.large[t] = (1.0 - d.gate[t]) * white[t] + d.gate[t] * mrw[t];
  {
    const double r = rms(d.large);
    const double s = r > 0.0 ? cfg.amp_large / r : 0.0;
    for (double& v : d.large) v *= s;
  }

  std::mt19937_64 rng_medium(seed_medium), rng_sym(seed_sym), rng_asym(seed_asym);
  EventTrain med = gen_events(EventKind::MediumEvent, n, cfg.n_days, cfg.w_medium, rng_medium, cfg);
  EventTrain sym = gen_events(EventKind::SymPulse, n, 4 * cfg.n_days, cfg.w_fine, rng_sym, cfg);
  EventTrain asym = gen_events(EventKind::AsymPulse, n, 4 * cfg.n_days, cfg.w_fine, rng_asym, cfg);

  const double r_med = rms(med.signal);
  const double a_med = r_med > 0.0 ? cfg.amp_medium / r_med : 0.0;
  std::vector<double> fine_unit(n);
  for (std::size_t t = 0; t < n; ++t) fine_unit[t] = sym.signal[t] + asym.signal[t];
  const double r_fine = rms(fine_unit);
  const double a_fine = r_fine > 0.0 ? cfg.amp_fine / r_fine : 0.0;

  for (auto& e : med.events) e.amplitude = a_med;
  for (auto& e : sym.events) e.amplitude = a_fine;
  for (auto& e : asym.events) e.amplitude = a_fine;
  d.events = med.events;
  d.events.insert(d.events.end(), sym.events.begin(), sym.events.end());
  d.events.insert(d.events.end(), asym.events.begin(), asym.events.end());
  std::stable_sort(d.events.begin(), d.events.end(), [](const SynthEvent& a, const SynthEvent& b) {
    return a.start != b.start ? a.start < b.start : a.kind < b.kind;
  });

  d.medium = render_events(d.events, n, cfg, true, false);
  d.fine = render_events(d.events, n, cfg, false, true);
  d.x.resize(n);
  for (std::size_t t = 0; t < n; ++t) d.x[t] = d.large[t] + d.medium[t] + d.fine[t];
  return d;
}

WindowLabel window_label(const SynthDataset& data, std::size_t end, std::size_t w) {
  if (end < w) throw InvalidArgument("window starts before the series");
  const std::size_t begin = end - w;
  bool pulse = false;
  for (const SynthEvent& e : data.events) {
    if (e.kind == EventKind::MediumEvent) {
      if (e.start < end && begin < e.start + e.length) return WindowLabel::Medium;
    } else {
      const std::size_t p = peak_of(e);
      if (p >= begin && p < end) pulse = true;
    }
  }
  return pulse ? WindowLabel::Pulse : WindowLabel::Background;
}

}  // namespace scatsep
