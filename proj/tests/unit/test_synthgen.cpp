#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "doctest.h"
#include "scatsep/errors.hpp"
#include "scatsep/scatcov.hpp"
#include "scatsep/synthgen.hpp"

using namespace scatsep;

namespace {

double kurtosis(const std::vector<double>& x) {
  double m = 0.0;
  for (double v : x) m += v;
  m /= static_cast<double>(x.size());
  double m2 = 0.0, m4 = 0.0;
  for (double v : x) {
    const double d = (v - m) * (v - m);
    m2 += d;
    m4 += d * d;
  }
  m2 /= static_cast<double>(x.size());
  m4 /= static_cast<double>(x.size());
  return m4 / (m2 * m2);
}

struct MeanSe {
  double mean, se;
};

MeanSe mean_se(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double m = 0.0;
  for (double a : v) m += a;
  m /= n;
  double s = 0.0;
  for (double a : v) s += (a - m) * (a - m);
  return {m, std::sqrt(s / (n - 1.0) / n)};
}

SynthConfig small_config(std::uint64_t seed) {
  SynthConfig c;
  c.w_large = 1024;
  c.w_medium = 256;
  c.w_fine = 64;
  c.eta = 128;
  c.n_days = 6;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("gate shape") {
  const std::size_t w = 4096, eta = 512;
  const auto g = gen_gate(6 * w, w, eta);
  CHECK(g[w / 2] == 0.0);
  CHECK(g[w] == 0.0);
  CHECK(g[w + eta] == 1.0);
  CHECK(g[2 * w - eta] == 1.0);
  CHECK(g[w + eta / 2] == doctest::Approx(0.5).epsilon(1e-12));
  for (std::size_t t = 0; t + 2 * w < g.size(); ++t) REQUIRE(g[t + 2 * w] == g[t]);
  for (double v : g) REQUIRE((v >= 0.0 && v <= 1.0));
  CHECK_THROWS_AS(gen_gate(100, 64, 32), InvalidArgument);
}

TEST_CASE("mrw kurtosis in the Gaussian limit and with intermittency") {
  for (std::uint64_t s = 0; s < 4; ++s) {
    const double k = kurtosis(gen_mrw(1 << 16, 1e-8, s));
    CHECK(k >= 2.8);
    CHECK(k <= 3.2);
  }
  double excess = 0.0;
  for (std::uint64_t s = 0; s < 16; ++s) excess += kurtosis(gen_mrw(1 << 16, 0.05, s)) - 3.0;
  CHECK(excess / 16.0 > 0.5);

  const auto x = gen_mrw(1 << 14, 0.05, 3);
  double m = 0.0, v = 0.0;
  for (double a : x) m += a;
  m /= static_cast<double>(x.size());
  for (double a : x) v += (a - m) * (a - m);
  CHECK(v / static_cast<double>(x.size()) == doctest::Approx(1.0).epsilon(1e-2));
  CHECK_THROWS_AS(gen_mrw(16, 0.0, 1), InvalidArgument);
}

TEST_CASE("mrw sparsity coefficients sit below the Gaussian value") {
  const int J = 8;
  const std::size_t L = 1 << 15;
  auto bank = cached_bank(J, L, WaveletFamily::BattleLemarie);
  std::vector<std::vector<double>> per(J);
  for (std::uint64_t r = 0; r < 16; ++r) {
    const auto x = gen_mrw(L, 0.05, 100 + r, 8192);
    const auto v = compute_scatcov(x, *bank, L).front();
    for (int j = 0; j < J; ++j) per[j].push_back(v.psi1[j]);
  }
  for (int j = 0; j < J; ++j) {
    const MeanSe ms = mean_se(per[j]);
    CHECK(ms.mean < std::numbers::pi / 4.0 - 3.0 * ms.se);
  }
}

TEST_CASE("pulse shapes") {
  SynthConfig c;
  SynthEvent a{EventKind::AsymPulse, 100, c.w_fine, 2.5, 0};
  const auto sig = render_events({a}, 1000, c, false, true);
  CHECK(sig[100] == 2.5);
  CHECK(sig[99] == 0.0);
  CHECK(sig[101] == doctest::Approx(2.5 * std::exp(-1.0 / c.pulse_tau())).epsilon(1e-14));

  SynthEvent s{EventKind::SymPulse, 0, c.w_fine - 1, 1.0, 0};
  const auto v = render_event(s, c);
  REQUIRE(v.size() % 2 == 1);
  for (std::size_t k = 0; k < v.size(); ++k) REQUIRE(v[k] == v[v.size() - 1 - k]);
  CHECK(v[(v.size() - 1) / 2] == 1.0);
  CHECK(v.front() == doctest::Approx(std::exp(-static_cast<double>((v.size() - 1) / 2) / c.pulse_tau())));
}

TEST_CASE("medium bursts are band limited with unit RMS before scaling") {
  SynthConfig c;
  SynthEvent e{EventKind::MediumEvent, 0, c.w_medium, 3.0, 77};
  const auto v = render_event(e, c);
  double ss = 0.0;
  for (double a : v) ss += a * a;
  CHECK(std::sqrt(ss / static_cast<double>(v.size())) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(v.front() == doctest::Approx(0.0).epsilon(1e-2));
  CHECK(render_event(e, c) == v);
}

TEST_CASE("medium events never overlap") {
  SynthConfig c;
  const std::size_t n = c.n_samples();
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    std::mt19937_64 rng(seed);
    const auto tr = gen_events(EventKind::MediumEvent, n, c.n_days, c.w_medium, rng, c);
    REQUIRE(tr.events.size() == c.n_days);
    for (std::size_t i = 0; i < tr.events.size(); ++i)
      for (std::size_t j = i + 1; j < tr.events.size(); ++j) {
        const auto& a = tr.events[i];
        const auto& b = tr.events[j];
        REQUIRE_FALSE((a.start < b.start + b.length && b.start < a.start + a.length));
      }
  }
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(gen_events(EventKind::MediumEvent, 1000, 4, 256, rng, c), SizingError);
}

TEST_CASE("dataset composition is exact and deterministic") {
  const SynthConfig c = small_config(5);
  const SynthDataset d = compose_dataset(c);
  const std::size_t n = c.n_samples();
  REQUIRE(d.x.size() == n);
  for (std::size_t t = 0; t < n; ++t) REQUIRE(d.x[t] == d.large[t] + d.medium[t] + d.fine[t]);

  std::size_t med = 0, sym = 0, asym = 0;
  for (const auto& e : d.events) {
    med += e.kind == EventKind::MediumEvent;
    sym += e.kind == EventKind::SymPulse;
    asym += e.kind == EventKind::AsymPulse;
  }
  CHECK(med == c.n_days);
  CHECK(sym == 4 * c.n_days);
  CHECK(asym == 4 * c.n_days);
  for (std::size_t k = 1; k < d.events.size(); ++k) CHECK(d.events[k - 1].start <= d.events[k].start);

  CHECK(render_events(d.events, n, c, true, false) == d.medium);
  CHECK(render_events(d.events, n, c, false, true) == d.fine);

  const SynthDataset again = compose_dataset(c);
  CHECK(again.x == d.x);
  CHECK(again.events.size() == d.events.size());
  CHECK(compose_dataset(small_config(6)).x != d.x);

  auto rms = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double a : v) s += a * a;
    return std::sqrt(s / static_cast<double>(v.size()));
  };
  CHECK(rms(d.large) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rms(d.medium) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rms(d.fine) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("config validation") {
  SynthConfig c;
  c.w_fine = 100;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = SynthConfig{};
  c.eta = c.w_large / 4;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = SynthConfig{};
  c.lambda2 = 0.0;
  CHECK_THROWS_AS(compose_dataset(c), InvalidArgument);
  CHECK(to_string(EventKind::AsymPulse) == "asym_pulse");
  CHECK(event_kind_from_string("medium_event") == EventKind::MediumEvent);
  CHECK_THROWS_AS(event_kind_from_string("quake"), FormatError);
}

TEST_CASE("window labels") {
  SynthDataset d;
  d.config = SynthConfig{};
  d.x.assign(10000, 0.0);
  d.events = {{EventKind::SymPulse, 1000, 255, 1.0, 0},
              {EventKind::MediumEvent, 5000, 1024, 1.0, 1},
              {EventKind::AsymPulse, 8000, 256, 1.0, 0}};
  CHECK(window_label(d, 1000, 1000) == WindowLabel::Background);
  CHECK(window_label(d, 1200, 256) == WindowLabel::Pulse);    // sym peak at 1127
  CHECK(window_label(d, 1127, 100) == WindowLabel::Background);
  CHECK(window_label(d, 1128, 100) == WindowLabel::Pulse);
  CHECK(window_label(d, 5001, 256) == WindowLabel::Medium);
  CHECK(window_label(d, 5000, 256) == WindowLabel::Background);
  CHECK(window_label(d, 8200, 4096) == WindowLabel::Medium);
  CHECK(window_label(d, 8100, 256) == WindowLabel::Pulse);
  CHECK_THROWS_AS(window_label(d, 10, 256), InvalidArgument);
}

TEST_CASE("white and mrw segments of the dataset have different fingerprints") {
  // Gate-0 segments with the events removed are white noise; gate-1 segments
  // carry the cascade.
  const std::size_t W = 2048;
  const int J = 6;
  auto bank = cached_bank(J, W, WaveletFamily::BattleLemarie);
  std::vector<std::vector<double>> white(J), mrw(J);
  for (std::uint64_t seed = 0; seed < 16; ++seed) {
    SynthConfig c;
    c.n_days = 2;
    c.seed = 1000 + seed;
    const SynthDataset d = compose_dataset(c);
    for (std::size_t day = 0; day < c.n_days; ++day) {
      const std::size_t a = day * c.day_length();
      const std::size_t b = a + c.w_large + c.eta + 256;
      std::vector<double> sw(W), sm(W);
      for (std::size_t k = 0; k < W; ++k) {
        REQUIRE(d.gate[a + k] == 0.0);
        REQUIRE(d.gate[b + k] == 1.0);
        sw[k] = d.x[a + k] - d.medium[a + k] - d.fine[a + k];
        sm[k] = d.x[b + k] - d.medium[b + k] - d.fine[b + k];
      }
      const auto vw = compute_scatcov(sw, *bank, W).front();
      const auto vm = compute_scatcov(sm, *bank, W).front();
      for (int j = 0; j < J; ++j) {
        white[j].push_back(vw.psi1[j]);
        mrw[j].push_back(vm.psi1[j]);
      }
    }
  }
  bool mrw_sparse = false;
  for (int j = 0; j < J; ++j) {
    const MeanSe w = mean_se(white[j]);
    CHECK(std::abs(w.mean - std::numbers::pi / 4.0) <= 3.0 * w.se);
    const MeanSe m = mean_se(mrw[j]);
    mrw_sparse = mrw_sparse || m.mean < std::numbers::pi / 4.0 - 3.0 * m.se;
  }
  CHECK(mrw_sparse);
}
