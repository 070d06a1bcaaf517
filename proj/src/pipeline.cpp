#include "scatsep/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "scatsep/errors.hpp"
#include "scatsep/metrics.hpp"
#include "scatsep/parallel.hpp"

namespace fs = std::filesystem;

namespace scatsep {

// ---- windowing -------------------------------------------------------------

WindowStream::WindowStream(std::span<const double> samples, std::vector<std::size_t> window_sizes, std::size_t hop)
    : samples_(samples), window_sizes_(std::move(window_sizes)), hop_(hop) {
  if (hop_ < 1) throw InvalidArgument("hop must be at least 1");
  if (window_sizes_.empty()) throw InvalidArgument("no window sizes");
  if (!std::is_sorted(window_sizes_.begin(), window_sizes_.end()) || window_sizes_.front() == 0)
    throw InvalidArgument("window sizes must be positive and increasing");
  const std::size_t wk = window_sizes_.back();
  count_ = samples_.size() < wk ? 0 : (samples_.size() - wk) / hop_ + 1;
}

WindowStack WindowStream::operator[](std::size_t k) const {
  if (k >= count_) throw InvalidArgument("stack index out of range");
  WindowStack s;
  s.end = end_of(k);
  for (std::size_t w : window_sizes_) s.windows.push_back(samples_.subspan(s.end - w, w));
  return s;
}

WindowStream window_stream(const SignalStore& store, std::vector<std::size_t> window_sizes, std::size_t hop) {
  return WindowStream(store.samples, std::move(window_sizes), hop);
}

// ---- features --------------------------------------------------------------

FeatureStore featurize(const SignalStore& store, const FeaturizeOptions& options) {
  check_pyramid(options.window_sizes);
  FeatureStore f;
  f.window_sizes = options.window_sizes;
  f.hop = options.hop ? options.hop : options.window_sizes.front();
  f.sample_rate = store.sample_rate;
  f.start_time = store.start_time;
  const WindowStream stream(store.samples, f.window_sizes, f.hop);
  if (stream.size() == 0)
    throw SizingError("signal of " + std::to_string(store.samples.size()) + " samples is shorter than the largest window (" +
                      std::to_string(f.window_sizes.back()) + ")");
  for (std::size_t w : f.window_sizes) f.octaves.push_back(octaves_for_window(options.octaves, w));

  const std::size_t n = stream.size(), S = f.window_sizes.size();
  std::vector<std::size_t> width(S);
  for (std::size_t i = 0; i < S; ++i) width[i] = ScatCovLayout(f.octaves[i]).flat_length();
  f.features.rows = n;
  f.features.u.resize(S);
  for (std::size_t i = 0; i < S; ++i) f.features.u[i].resize(n * width[i]);

  const PyramidOptions popt{options.octaves, options.family};
  const std::size_t workers = options.workers ? options.workers : default_workers();
  parallel_for(n, workers, [&](std::size_t k, std::size_t) {
    const std::size_t end = stream.end_of(k);
    const auto p = compute_pyramidal(std::span(store.samples).subspan(0, end), f.window_sizes, popt);
    for (std::size_t i = 0; i < S; ++i) std::copy(p.u[i].begin(), p.u[i].end(), f.features.u[i].begin() + k * width[i]);
  });
  for (std::size_t k = 0; k < n; ++k) {
    f.end_index.push_back(stream.end_of(k));
    f.end_time.push_back(store.start_time + static_cast<double>(stream.end_of(k)) / store.sample_rate);
  }
  return f;
}

void save_features(const FeatureStore& f, const fs::path& path) {
  Container c;
  c.kind = "features";
  c.meta = {{"window_sizes", f.window_sizes},
            {"octaves", f.octaves},
            {"hop", f.hop},
            {"sample_rate", f.sample_rate},
            {"start_time", f.start_time},
            {"rows", f.features.rows},
            {"ordering_version", ScatCovLayout::kOrderingVersion}};
  std::vector<double> idx(f.end_index.begin(), f.end_index.end());
  c.blobs.push_back({"end_index", DType::F64, {idx.size()}, idx});
  c.blobs.push_back({"end_time", DType::F64, {f.end_time.size()}, f.end_time});
  for (std::size_t i = 0; i < f.features.u.size(); ++i) {
    const std::size_t d = f.features.rows ? f.features.u[i].size() / f.features.rows : 0;
    c.blobs.push_back({"u/" + std::to_string(i), DType::F64, {f.features.rows, d}, f.features.u[i]});
  }
  write_container(path, c);
}

FeatureStore load_features(const fs::path& path) {
  const Container c = read_container(path, "features");
  if (c.meta.at("ordering_version").get<int>() != ScatCovLayout::kOrderingVersion)
    throw FormatError(path.string() + ": feature ordering version mismatch");
  FeatureStore f;
  f.window_sizes = c.meta.at("window_sizes").get<std::vector<std::size_t>>();
  f.octaves = c.meta.at("octaves").get<std::vector<int>>();
  f.hop = c.meta.at("hop");
  f.sample_rate = c.meta.at("sample_rate");
  f.start_time = c.meta.at("start_time");
  f.features.rows = c.meta.at("rows");
  for (double v : c.blob("end_index").data) f.end_index.push_back(static_cast<std::size_t>(v));
  f.end_time = c.blob("end_time").data;
  for (std::size_t i = 0; i < f.window_sizes.size(); ++i) f.features.u.push_back(c.blob("u/" + std::to_string(i)).data);
  if (f.end_index.size() != f.features.rows || f.end_time.size() != f.features.rows)
    throw FormatError(path.string() + ": row count mismatch");
  return f;
}

// ---- synthetic datasets ----------------------------------------------------

std::vector<std::size_t> synth_window_sizes(const SynthConfig& c) {
  std::vector<std::size_t> w{c.w_fine, c.w_medium, c.w_large};
  check_pyramid(w);
  return w;
}

Json to_json(const SynthConfig& c) {
  return {{"w_large", c.w_large},       {"w_medium", c.w_medium},     {"w_fine", c.w_fine},
          {"n_days", c.n_days},         {"eta", c.eta},               {"amp_large", c.amp_large},
          {"amp_medium", c.amp_medium}, {"amp_fine", c.amp_fine},     {"lambda2", c.lambda2},
          {"mrw_integral_scale", c.mrw_integral_scale}, {"tau_p", c.tau_p}, {"burst_low", c.burst_low},
          {"burst_high", c.burst_high}, {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const Json& j) {
  SynthConfig c;
  c.w_large = j.at("w_large");
  c.w_medium = j.at("w_medium");
  c.w_fine = j.at("w_fine");
  c.n_days = j.at("n_days");
  c.eta = j.at("eta");
  c.amp_large = j.at("amp_large");
  c.amp_medium = j.at("amp_medium");
  c.amp_fine = j.at("amp_fine");
  c.lambda2 = j.at("lambda2");
  c.mrw_integral_scale = j.at("mrw_integral_scale");
  c.tau_p = j.at("tau_p");
  c.burst_low = j.at("burst_low");
  c.burst_high = j.at("burst_high");
  c.seed = j.at("seed");
  return c;
}

double synth_sample_rate(const SynthConfig& c) { return static_cast<double>(c.day_length()) / 86400.0; }

namespace {

const char* const kComponents[] = {"x", "large", "medium", "fine", "gate"};

std::vector<double>& component(SynthDataset& d, const std::string& name) {
  if (name == "x") return d.x;
  if (name == "large") return d.large;
  if (name == "medium") return d.medium;
  if (name == "fine") return d.fine;
  return d.gate;
}

}  // namespace

void write_dataset(const fs::path& dir, const SynthDataset& d) {
  fs::create_directories(dir);
  SynthDataset copy = d;
  for (const char* name : kComponents) {
    SignalStore s;
    s.samples = component(copy, name);
    s.sample_rate = synth_sample_rate(d.config);
    s.channel = name;
    write_signal(dir / name, s);
  }
  Json ev = Json::array();
  for (const SynthEvent& e : d.events)
    ev.push_back({{"kind", to_string(e.kind)},
                  {"start", e.start},
                  {"length", e.length},
                  {"amplitude", e.amplitude},
                  {"seed", e.seed}});
  write_json(dir / "events.json", {{"schema_version", kSchemaVersion}, {"events", ev}});
  write_json(dir / "config.json", {{"schema_version", kSchemaVersion}, {"synth", to_json(d.config)}});
}

SynthDataset read_dataset(const fs::path& dir) {
  SynthDataset d;
  const Json cfg = read_json(dir / "config.json");
  try {
    d.config = synth_config_from_json(cfg.at("synth"));
    for (const auto& e : read_json(dir / "events.json").at("events"))
      d.events.push_back({event_kind_from_string(e.at("kind")), e.at("start"), e.at("length"), e.at("amplitude"),
                          e.at("seed")});
  } catch (const Json::exception& e) {
    throw FormatError(dir.string() + ": " + e.what());
  }
  for (const char* name : kComponents) {
    component(d, name) = ingest(dir / name).samples;
    if (component(d, name).size() != d.config.n_samples())
      throw FormatError(dir.string() + ": component '" + name + "' has the wrong length");
  }
  return d;
}

std::vector<int> window_labels(const SynthDataset& d, std::span<const std::size_t> end_index, std::size_t w) {
  std::vector<int> out;
  out.reserve(end_index.size());
  for (std::size_t e : end_index) out.push_back(static_cast<int>(window_label(d, e, w)));
  return out;
}

// ---- assignments and histograms --------------------------------------------

void save_assignments(const ClusterAssignment& a, const std::vector<std::size_t>& clusters, const fs::path& path) {
  Container c;
  c.kind = "assignments";
  c.meta = {{"clusters", clusters}, {"rows", a.end_time.size()}};
  c.blobs.push_back({"end_time", DType::F64, {a.end_time.size()}, a.end_time});
  for (std::size_t i = 0; i < a.probs.size(); ++i)
    c.blobs.push_back({"probs/" + std::to_string(i), DType::F64, {a.end_time.size(), clusters[i]}, a.probs[i]});
  write_container(path, c);
}

ClusterAssignment load_assignments(const fs::path& path, std::vector<std::size_t>* clusters) {
  const Container c = read_container(path, "assignments");
  const auto cl = c.meta.at("clusters").get<std::vector<std::size_t>>();
  if (clusters) *clusters = cl;
  ClusterAssignment a;
  a.end_time = c.blob("end_time").data;
  const std::size_t rows = a.end_time.size();
  for (std::size_t i = 0; i < cl.size(); ++i) {
    a.probs.push_back(c.blob("probs/" + std::to_string(i)).data);
    if (a.probs.back().size() != rows * cl[i]) throw FormatError(path.string() + ": probability table has the wrong size");
    std::vector<int> labels;
    std::vector<double> conf;
    for (std::size_t r = 0; r < rows; ++r) {
      const auto row = std::span(a.probs.back()).subspan(r * cl[i], cl[i]);
      const auto it = std::max_element(row.begin(), row.end());
      labels.push_back(static_cast<int>(it - row.begin()));
      conf.push_back(*it);
    }
    a.labels.push_back(std::move(labels));
    a.confidence.push_back(std::move(conf));
  }
  return a;
}

std::string assignments_csv(const ClusterAssignment& a) {
  std::ostringstream s;
  s << std::setprecision(17) << "end_time";
  for (std::size_t i = 0; i < a.labels.size(); ++i) s << ",label_s" << i << ",confidence_s" << i;
  s << '\n';
  for (std::size_t r = 0; r < a.end_time.size(); ++r) {
    s << a.end_time[r];
    for (std::size_t i = 0; i < a.labels.size(); ++i) s << ',' << a.labels[i][r] << ',' << a.confidence[i][r];
    s << '\n';
  }
  return s.str();
}

std::string TimeHistogram::to_csv() const {
  std::ostringstream s;
  s << "bin_start_hours";
  for (std::size_t i = 0; i < clusters.size(); ++i)
    for (std::size_t k = 0; k < clusters[i]; ++k) s << ",s" << i << "_c" << k;
  s << '\n';
  for (std::size_t b = 0; b < bins; ++b) {
    s << 24.0 * static_cast<double>(b) / static_cast<double>(bins);
    for (std::size_t v : counts[b]) s << ',' << v;
    s << '\n';
  }
  return s.str();
}

TimeHistogram time_histogram(const ClusterAssignment& a, const std::vector<std::size_t>& clusters, std::size_t bins,
                             double day_seconds) {
  if (bins < 1) throw InvalidArgument("histogram needs at least one bin");
  if (!(day_seconds > 0.0)) throw InvalidArgument("day length must be positive");
  if (a.labels.size() != clusters.size()) throw SizingError("assignment scales do not match the cluster counts");
  TimeHistogram h;
  h.bins = bins;
  h.clusters = clusters;
  const std::size_t total = std::accumulate(clusters.begin(), clusters.end(), std::size_t{0});
  h.counts.assign(bins, std::vector<std::size_t>(total, 0));
  for (std::size_t r = 0; r < a.end_time.size(); ++r) {
    double tod = std::fmod(a.end_time[r], day_seconds);
    if (tod < 0.0) tod += day_seconds;
    const std::size_t b = std::min(bins - 1, static_cast<std::size_t>(tod / day_seconds * static_cast<double>(bins)));
    std::size_t col = 0;
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      h.counts[b][col + static_cast<std::size_t>(a.labels[i][r])] += 1;
      col += clusters[i];
    }
  }
  return h;
}

// ---- separation ------------------------------------------------------------

SeparationScenario make_separation_scenario(const SynthDataset& d, std::size_t window, std::size_t tiles,
                                            std::size_t n_snippets) {
  if (window == 0 || tiles == 0) throw InvalidArgument("window and tile count must be positive");
  const std::size_t W = window * tiles;
  const std::size_t n = d.x.size();
  auto medium_overlaps = [&](std::size_t a, std::size_t len) {
    std::size_t k = 0;
    for (const SynthEvent& e : d.events)
      k += e.kind == EventKind::MediumEvent && e.start < a + len && a < e.start + e.length;
    return k;
  };
  auto medium_inside = [&](std::size_t a, std::size_t len) {
    std::size_t k = 0;
    for (const SynthEvent& e : d.events)
      k += e.kind == EventKind::MediumEvent && e.start >= a && e.start + e.length <= a + len;
    return k;
  };
  SeparationScenario s;
  s.window = window;
  s.target_start = std::numeric_limits<std::size_t>::max();
  const std::size_t day = d.config.day_length();
  for (std::size_t a = 0; a + W <= n; a += day)
    if (medium_inside(a, W) == 1 && medium_overlaps(a, W) == 1) {
      s.target_start = a;
      break;
    }
  if (s.target_start == std::numeric_limits<std::size_t>::max())
    throw InvalidArgument("no day starts with a segment of " + std::to_string(W) + " samples holding exactly one medium event");
  s.x.assign(d.x.begin() + static_cast<std::ptrdiff_t>(s.target_start),
             d.x.begin() + static_cast<std::ptrdiff_t>(s.target_start + W));
  s.medium.assign(d.medium.begin() + static_cast<std::ptrdiff_t>(s.target_start),
                  d.medium.begin() + static_cast<std::ptrdiff_t>(s.target_start + W));
  for (std::size_t a = 0; a + window <= n && s.snippets.size() < n_snippets; a += window) {
    if (a < s.target_start + W && s.target_start < a + window) continue;
    if (medium_overlaps(a, window)) continue;
    if (!std::all_of(d.gate.begin() + static_cast<std::ptrdiff_t>(a),
                     d.gate.begin() + static_cast<std::ptrdiff_t>(a + window), [](double g) { return g == 0.0; }))
      continue;
    s.snippets.emplace_back(d.x.begin() + static_cast<std::ptrdiff_t>(a),
                            d.x.begin() + static_cast<std::ptrdiff_t>(a + window));
    s.snippet_starts.push_back(a);
  }
  if (s.snippets.size() < 2) throw InvalidArgument("fewer than two background snippets available");
  return s;
}

std::vector<std::vector<double>> cluster_snippets(std::span<const double> x, const FeatureStore& f,
                                                  const ClusterAssignment& a, std::size_t scale, int cluster,
                                                  std::size_t window, std::size_t n_snippets,
                                                  std::size_t exclude_begin, std::size_t exclude_end) {
  if (scale >= a.labels.size()) throw InvalidArgument("prior scale out of range");
  if (a.labels[scale].size() != f.end_index.size()) throw SizingError("assignments do not match the features");
  std::vector<std::vector<double>> out;
  std::size_t last_end = 0;
  for (std::size_t r = 0; r < f.end_index.size() && out.size() < n_snippets; ++r) {
    if (a.labels[scale][r] != cluster) continue;
    const std::size_t end = f.end_index[r];
    if (end < window || end > x.size()) continue;
    const std::size_t begin = end - window;
    if (begin < exclude_end && exclude_begin < end) continue;
    if (!out.empty() && begin < last_end) continue;  // keep snippets disjoint
    out.emplace_back(x.begin() + static_cast<std::ptrdiff_t>(begin), x.begin() + static_cast<std::ptrdiff_t>(end));
    last_end = end;
  }
  return out;
}

Json SeparationEval::to_json() const {
  return {{"baseline_error", baseline_error},
          {"final_error", final_error},
          {"improvement", improvement},
          {"monotone", monotone},
          {"iterations", iterations},
          {"status", status},
          {"initial_loss", {{"prior", result.initial.prior}, {"data", result.initial.data}, {"cross", result.initial.cross}}},
          {"final_loss",
           {{"prior", result.final_terms.prior}, {"data", result.final_terms.data}, {"cross", result.final_terms.cross}}}};
}

SeparationEval evaluate_separation(const SeparationScenario& s, int octaves, const SeparationConfig& config,
                                   const LbfgsMonitor& monitor) {
  auto bank = cached_bank(octaves, s.window, WaveletFamily::BattleLemarie);
  SeparationEval e;
  e.result = separate(s.x, s.snippets, bank, s.window, config, monitor);
  e.baseline_error = relative_l2_error(s.x, s.medium);
  e.final_error = relative_l2_error(e.result.residual, s.medium);
  e.improvement = e.baseline_error / e.final_error;
  for (std::size_t k = 1; k < e.result.trajectory.size(); ++k)
    e.monotone = e.monotone && e.result.trajectory[k].value <= e.result.trajectory[k - 1].value;
  e.iterations = e.result.iterations;
  e.status = to_string(e.result.status);
  return e;
}

// ---- command line ----------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string config_hash(const Json& config) {
  const std::string s = config.dump();
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

void finish_manifest(RunManifest& m, const fs::path& dir, Clock::time_point t0) {
  m.config_hash = config_hash(m.config);
  m.timings["total_seconds"] = seconds_since(t0);
  write_json(dir / "manifest.json", m.to_json());
}

fs::path signal_base(const fs::path& in) { return fs::is_directory(in) ? in / "x" : in; }

void add_signal_input(RunManifest& m, const fs::path& base) {
  fs::path data = base, meta = base;
  data.replace_extension(".f32");
  meta.replace_extension(".json");
  m.add_input(data);
  m.add_input(meta);
}

void add_dataset_inputs(RunManifest& m, const fs::path& dir) {
  for (const char* name : kComponents) add_signal_input(m, dir / name);
  m.add_input(dir / "events.json");
  m.add_input(dir / "config.json");
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(item, &pos);
      if (pos != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw InvalidArgument("expected a comma-separated list of integers, got '" + s + "'");
    }
  }
  if (out.empty()) throw InvalidArgument("empty integer list");
  return out;
}

std::string csv_trajectory(const SeparationResult& r) {
  std::ostringstream s;
  s << std::setprecision(17) << "iteration,loss,grad_inf,step,evaluations,fallback\n";
  for (const LbfgsStep& t : r.trajectory)
    s << t.iteration << ',' << t.value << ',' << t.grad_inf << ',' << t.step << ',' << t.evaluations << ','
      << t.fallback << '\n';
  return s.str();
}

Json gradcheck_report(std::uint64_t seed) {
  FvaeConfig c;
  c.d_in = {6, 4};
  c.clusters = {3, 2};
  c.hidden = 8;
  c.latent = 3;
  c.n_joint_blocks = 1;
  c.leaky_slope = 0.2;
  c.seed = seed;
  const FvaeModel m = init_model(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  FeatureMatrix batch;
  batch.rows = 6;
  for (std::size_t d : c.d_in) {
    std::vector<double> u(batch.rows * d);
    for (double& v : u) v = nd(rng);
    batch.u.push_back(std::move(u));
  }
  const ElboNoise noise = draw_noise(c, batch.rows, rng);
  const auto flat = m.flat_params();
  diff::GradcheckOptions opt;
  opt.coordinates = 60;
  opt.step = 1e-5;
  opt.seed = seed;
  Json out;
  for (BatchNormMode mode : {BatchNormMode::Train, BatchNormMode::Eval}) {
    const auto r = diff::gradcheck(
        [&](diff::Tape& t, diff::NodeId p) { return record_elbo(t, p, m, batch, 0.8, noise, mode); }, flat,
        {1, flat.size()}, opt);
    out[mode == BatchNormMode::Train ? "elbo_train" : "elbo_eval"] = {{"max_rel_error", r.max_rel_error},
                                                                       {"checked", r.checked}};
  }

  // Separation loss: central differences on random coordinates.
  const std::size_t w = 128, tiles = 2;
  std::vector<double> x(w * tiles);
  for (double& v : x) v = nd(rng);
  std::vector<std::vector<double>> snippets(4, std::vector<double>(w));
  for (auto& s : snippets)
    for (double& v : s) v = nd(rng);
  SeparationOptions so;
  so.cross_first_order_weight = 1.0;
  so.workers = 1;
  SeparationProblem p(x, snippets, cached_bank(4, w, WaveletFamily::BattleLemarie), so);
  std::vector<double> s1(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) s1[k] = 0.5 * x[k] + 0.1 * nd(rng);
  std::vector<double> grad(x.size());
  p.evaluate(s1, grad);
  double worst = 0.0;
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  for (int q = 0; q < 20; ++q) {
    const std::size_t k = pick(rng);
    const double h = 1e-5 * std::max(1.0, std::abs(s1[k]));
    auto at = [&](double d) {
      std::vector<double> y = s1;
      y[k] += d;
      return p.evaluate(y, {}).total();
    };
    const double fd = (at(h) - at(-h)) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - grad[k]) / std::max({std::abs(fd), std::abs(grad[k]), 1e-8}));
  }
  out["total_loss"] = {{"max_rel_error", worst}, {"checked", 20}};
  return out;
}

void write_features_and_manifest(const FeatureStore& f, const fs::path& out_dir, RunManifest& m) {
  fs::create_directories(out_dir);
  save_features(f, out_dir / "features.bin");
  m.add_output(out_dir / "features.bin");
}

int dispatch(const std::vector<std::string>& argv, std::ostream& out) {
  CLI::App app{"scatsep: scattering-covariance clustering and source separation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::uint64_t seed = 0;
  std::string output;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("-o,--output", output, "output directory")->required();
  };

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic three-layer dataset");
  common(synth);
  std::size_t days = 8;
  double lambda2 = 0.05;
  synth->add_option("--days", days, "number of synthetic days");
  synth->add_option("--lambda2", lambda2, "intermittency of the multifractal background");

  // featurize
  auto* feat = app.add_subcommand("featurize", "compute pyramidal scattering covariance features");
  common(feat);
  std::string input, scales_arg;
  int octaves = 7;
  std::size_t hop = 0;
  feat->add_option("input", input, "dataset directory or signal path")->required();
  feat->add_option("--scales", scales_arg, "comma-separated window sizes (factor-4 pyramid)");
  feat->add_option("--octaves", octaves, "requested octave count J");
  feat->add_option("--hop", hop, "stride between stacks (default: smallest window)");

  // train
  auto* tr = app.add_subcommand("train", "train the factorial VAE on a feature store");
  common(tr);
  std::string clusters_arg = "4";
  FvaeConfig fc;
  tr->add_option("features", input, "featurize output directory")->required();
  tr->add_option("--clusters", clusters_arg, "clusters per scale (one value or a comma list)");
  tr->add_option("--hidden", fc.hidden);
  tr->add_option("--latent", fc.latent);
  tr->add_option("--blocks", fc.n_joint_blocks, "residual blocks in the joint encoder");
  tr->add_option("--epochs", fc.epochs);
  tr->add_option("--batch", fc.batch);
  tr->add_option("--lr", fc.lr);
  tr->add_option("--tau0", fc.tau0);
  tr->add_option("--tau-min", fc.tau_min);
  tr->add_option("--tau-decay", fc.tau_decay);

  // assign
  auto* as = app.add_subcommand("assign", "assign feature stacks to clusters");
  common(as);
  std::string model_dir, features_dir;
  as->add_option("model", model_dir, "train output directory")->required();
  as->add_option("features", features_dir, "featurize output directory")->required();

  // histogram
  auto* hi = app.add_subcommand("histogram", "time-of-day histogram of cluster assignments");
  common(hi);
  std::size_t bins = 48;
  double day_seconds = 86400.0;
  hi->add_option("assignments", input, "assign output directory")->required();
  hi->add_option("--bins", bins);
  hi->add_option("--day-seconds", day_seconds);

  // sample
  auto* sa = app.add_subcommand("sample", "decode feature vectors from one cluster of the prior");
  common(sa);
  std::size_t prior_scale = 0, n_samples = 16;
  int prior_cluster = 0;
  sa->add_option("model", model_dir, "train output directory")->required();
  sa->add_option("--prior-scale", prior_scale);
  sa->add_option("--prior-cluster", prior_cluster);
  sa->add_option("-n,--count", n_samples);

  // separate
  auto* se = app.add_subcommand("separate", "recover the non-background source of a signal segment");
  common(se);
  std::string assign_dir;
  std::size_t n_snippets = 50, iters = 1000, target_start = 0, target_tiles = 4;
  std::string pairing = "broadcast";
  se->add_option("input", input, "dataset directory or signal path")->required();
  se->add_option("--features", features_dir, "featurize output directory")->required();
  se->add_option("--assignments", assign_dir, "assign output directory")->required();
  se->add_option("--prior-scale", prior_scale);
  se->add_option("--prior-cluster", prior_cluster);
  se->add_option("--snippets", n_snippets);
  se->add_option("--iters", iters);
  se->add_option("--octaves", octaves);
  se->add_option("--target-start", target_start, "first sample of the segment");
  se->add_option("--target-tiles", target_tiles, "segment length in prior-scale windows");
  se->add_option("--pairing", pairing, "broadcast or cyclic");

  // eval
  auto* ev = app.add_subcommand("eval", "score a synthetic run against ground truth");
  common(ev);
  std::string task, data_dir, result_dir;
  std::size_t eval_scale = 0, window = 0;
  ev->add_option("--task", task, "clustering or separation")->required();
  ev->add_option("--data", data_dir, "synth output directory")->required();
  ev->add_option("--assignments", assign_dir);
  ev->add_option("--features", features_dir);
  ev->add_option("--scale", eval_scale, "scale scored by the clustering task");
  ev->add_option("--result", result_dir, "separate output directory (else the scenario is run)");
  ev->add_option("--snippets", n_snippets);
  ev->add_option("--iters", iters);
  ev->add_option("--octaves", octaves);
  ev->add_option("--window", window, "analysis window (default: medium window)");
  ev->add_option("--tiles", target_tiles);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference checks of the ELBO and separation loss");
  common(gc);

  std::vector<std::string> args(argv.rbegin(), argv.rend() - 1);
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  }

  const auto t0 = Clock::now();
  const fs::path od(output);
  fs::create_directories(od);
  RunManifest man;
  man.seed = seed;
  Json summary;

  if (*synth) {
    SynthConfig c;
    c.n_days = days;
    c.lambda2 = lambda2;
    c.seed = seed;
    const SynthDataset d = compose_dataset(c);
    write_dataset(od, d);
    man.stage = "synth";
    man.config = to_json(c);
    for (const char* name : kComponents) {
      man.add_output(od / (std::string(name) + ".f32"));
      man.add_output(od / (std::string(name) + ".json"));
    }
    man.add_output(od / "events.json");
    man.add_output(od / "config.json");
    summary = {{"samples", d.x.size()}, {"events", d.events.size()}};
  } else if (*feat) {
    const fs::path base = signal_base(input);
    const SignalStore s = ingest(base);
    FeaturizeOptions fo;
    fo.octaves = octaves;
    fo.hop = hop;
    if (!scales_arg.empty()) {
      fo.window_sizes = parse_sizes(scales_arg);
    } else if (fs::is_directory(input) && fs::exists(fs::path(input) / "config.json")) {
      fo.window_sizes = synth_window_sizes(synth_config_from_json(read_json(fs::path(input) / "config.json").at("synth")));
    } else {
      fo.window_sizes = {1024, 4096, 16384, 65536};
    }
    const FeatureStore f = featurize(s, fo);
    man.stage = "featurize";
    man.config = {{"window_sizes", f.window_sizes}, {"octaves", f.octaves}, {"hop", f.hop}};
    add_signal_input(man, base);
    write_features_and_manifest(f, od, man);
    summary = {{"stacks", f.features.rows}, {"window_sizes", f.window_sizes}};
  } else if (*tr) {
    const fs::path fpath = fs::path(input) / "features.bin";
    const FeatureStore f = load_features(fpath);
    for (const auto& u : f.features.u) fc.d_in.push_back(u.size() / std::max<std::size_t>(1, f.features.rows));
    auto cl = parse_sizes(clusters_arg);
    if (cl.size() == 1) cl.assign(fc.d_in.size(), cl.front());
    fc.clusters = cl;
    fc.seed = seed;
    FvaeModel m = init_model(fc);
    std::ostringstream hist;
    hist << std::setprecision(17) << "epoch,tau,train_total,recon,kl_cat,kl_gauss,val_total\n";
    train(m, f.features, [&](const EpochStats& e) {
      hist << e.epoch << ',' << e.tau << ',' << e.train_total << ',' << e.recon << ',' << e.kl_cat << ',' << e.kl_gauss
           << ',' << e.val_total << '\n';
    });
    save_checkpoint(m, od / "model.bin");
    write_text(od / "history.csv", hist.str());
    man.stage = "train";
    man.config = fc.to_json();
    man.add_input(fpath);
    man.add_output(od / "model.bin");
    man.add_output(od / "history.csv");
    summary = {{"epochs", m.epoch}, {"parameters", m.parameter_count()}};
  } else if (*as) {
    const fs::path mpath = fs::path(model_dir) / "model.bin", fpath = fs::path(features_dir) / "features.bin";
    const FvaeModel m = load_checkpoint(mpath);
    const FeatureStore f = load_features(fpath);
    const ClusterAssignment a = assign_clusters(m, f.features, f.end_time);
    save_assignments(a, m.config.clusters, od / "assignments.bin");
    write_text(od / "assignments.csv", assignments_csv(a));
    man.stage = "assign";
    man.config = {{"clusters", m.config.clusters}};
    man.add_input(mpath);
    man.add_input(fpath);
    man.add_output(od / "assignments.bin");
    man.add_output(od / "assignments.csv");
    summary = {{"rows", a.end_time.size()}};
  } else if (*hi) {
    const fs::path apath = fs::path(input) / "assignments.bin";
    std::vector<std::size_t> cl;
    const ClusterAssignment a = load_assignments(apath, &cl);
    const TimeHistogram h = time_histogram(a, cl, bins, day_seconds);
    write_text(od / "histogram.csv", h.to_csv());
    man.stage = "histogram";
    man.config = {{"bins", bins}, {"day_seconds", day_seconds}};
    man.add_input(apath);
    man.add_output(od / "histogram.csv");
    summary = {{"bins", bins}};
  } else if (*sa) {
    const fs::path mpath = fs::path(model_dir) / "model.bin";
    const FvaeModel m = load_checkpoint(mpath);
    std::mt19937_64 rng(seed);
    const auto u = sample_cluster_representation(m, prior_scale, static_cast<std::size_t>(prior_cluster), n_samples, rng);
    const std::size_t d = m.config.d_in[prior_scale];
    std::ostringstream s;
    s << std::setprecision(17);
    for (std::size_t r = 0; r < n_samples; ++r) {
      for (std::size_t k = 0; k < d; ++k) s << (k ? "," : "") << u[r * d + k];
      s << '\n';
    }
    write_text(od / "samples.csv", s.str());
    man.stage = "sample";
    man.config = {{"prior_scale", prior_scale}, {"prior_cluster", prior_cluster}, {"count", n_samples}};
    man.add_input(mpath);
    man.add_output(od / "samples.csv");
    summary = {{"samples", n_samples}, {"width", d}};
  } else if (*se) {
    const fs::path base = signal_base(input);
    const fs::path fpath = fs::path(features_dir) / "features.bin", apath = fs::path(assign_dir) / "assignments.bin";
    const SignalStore s = ingest(base);
    const FeatureStore f = load_features(fpath);
    const ClusterAssignment a = load_assignments(apath);
    if (prior_scale >= f.window_sizes.size()) throw InvalidArgument("prior scale out of range");
    const std::size_t w = f.window_sizes[prior_scale];
    const std::size_t W = w * target_tiles;
    if (target_start + W > s.samples.size()) throw SizingError("target segment runs past the end of the signal");
    const auto snippets = cluster_snippets(s.samples, f, a, prior_scale, prior_cluster, w, n_snippets, target_start,
                                           target_start + W);
    if (snippets.size() < 2)
      throw InvalidArgument("cluster " + std::to_string(prior_cluster) + " provides fewer than two snippets");
    SeparationConfig cfg;
    cfg.lbfgs.max_iter = iters;
    cfg.lbfgs.grad_tol = 0.0;
    if (pairing == "cyclic") cfg.options.pairing = SnippetPairing::Cyclic;
    else if (pairing != "broadcast") throw InvalidArgument("pairing must be broadcast or cyclic");
    const int J = octaves_for_window(octaves, w);
    const std::vector<double> x(s.samples.begin() + static_cast<std::ptrdiff_t>(target_start),
                                s.samples.begin() + static_cast<std::ptrdiff_t>(target_start + W));
    const SeparationResult r = separate(x, snippets, cached_bank(J, w, WaveletFamily::BattleLemarie), w, cfg);
    SignalStore est{r.s1_hat, s.sample_rate, s.start_time + static_cast<double>(target_start) / s.sample_rate, "s1_hat"};
    SignalStore res{r.residual, s.sample_rate, est.start_time, "residual"};
    write_signal(od / "s1_hat", est);
    write_signal(od / "residual", res);
    write_text(od / "trajectory.csv", csv_trajectory(r));
    const Json result = {{"schema_version", kSchemaVersion},
                         {"target_start", target_start},
                         {"target_length", W},
                         {"window", w},
                         {"octaves", J},
                         {"snippets", snippets.size()},
                         {"iterations", r.iterations},
                         {"status", to_string(r.status)},
                         {"initial_loss", r.initial.total()},
                         {"final_loss", r.final_terms.total()}};
    write_json(od / "result.json", result);
    man.stage = "separate";
    man.config = {{"prior_scale", prior_scale}, {"prior_cluster", prior_cluster}, {"snippets", n_snippets},
                  {"iters", iters},             {"octaves", J},                   {"target_start", target_start},
                  {"target_tiles", target_tiles}, {"pairing", pairing}};
    add_signal_input(man, base);
    man.add_input(fpath);
    man.add_input(apath);
    for (const char* f2 : {"s1_hat.f32", "s1_hat.json", "residual.f32", "residual.json", "trajectory.csv", "result.json"})
      man.add_output(od / f2);
    summary = result;
  } else if (*ev) {
    const SynthDataset d = read_dataset(data_dir);
    add_dataset_inputs(man, data_dir);
    man.stage = "eval";
    if (task == "clustering") {
      if (assign_dir.empty() || features_dir.empty())
        throw InvalidArgument("clustering evaluation needs --assignments and --features");
      const fs::path apath = fs::path(assign_dir) / "assignments.bin", fpath = fs::path(features_dir) / "features.bin";
      const FeatureStore f = load_features(fpath);
      const ClusterAssignment a = load_assignments(apath);
      if (eval_scale >= f.window_sizes.size()) throw InvalidArgument("scale out of range");
      const auto truth = window_labels(d, f.end_index, f.window_sizes[eval_scale]);
      const double ari = adjusted_rand_index(a.labels[eval_scale], truth);
      man.add_input(apath);
      man.add_input(fpath);
      man.config = {{"task", task}, {"scale", eval_scale}};
      summary = {{"task", task}, {"scale", eval_scale}, {"window", f.window_sizes[eval_scale]}, {"ari", ari}};
    } else if (task == "separation") {
      if (!result_dir.empty()) {
        const fs::path rpath = fs::path(result_dir) / "result.json";
        const Json r = read_json(rpath);
        const std::size_t start = r.at("target_start"), len = r.at("target_length");
        const SignalStore res = ingest(fs::path(result_dir) / "residual");
        const std::span<const double> med = std::span(d.medium).subspan(start, len);
        const std::span<const double> xs = std::span(d.x).subspan(start, len);
        const double base = relative_l2_error(xs, med), fin = relative_l2_error(res.samples, med);
        man.add_input(rpath);
        man.config = {{"task", task}};
        summary = {{"task", task}, {"baseline_error", base}, {"final_error", fin}, {"improvement", base / fin}};
      } else {
        const std::size_t w = window ? window : d.config.w_medium;
        const SeparationScenario sc = make_separation_scenario(d, w, target_tiles, n_snippets);
        SeparationConfig cfg;
        cfg.lbfgs.max_iter = iters;
        cfg.lbfgs.grad_tol = 0.0;
        const SeparationEval e = evaluate_separation(sc, octaves_for_window(octaves, w), cfg);
        man.config = {{"task", task}, {"window", w}, {"tiles", target_tiles}, {"snippets", n_snippets},
                      {"iters", iters}, {"octaves", octaves}};
        summary = e.to_json();
        summary["task"] = task;
        summary["target_start"] = sc.target_start;
      }
    } else {
      throw InvalidArgument("unknown eval task '" + task + "' (expected clustering or separation)");
    }
    write_json(od / "eval.json", summary);
    man.add_output(od / "eval.json");
  } else if (*gc) {
    summary = gradcheck_report(seed);
    write_json(od / "gradcheck.json", summary);
    man.stage = "gradcheck";
    man.config = Json::object();
    man.add_output(od / "gradcheck.json");
  }
  finish_manifest(man, od, t0);
  out << summary.dump() << '\n';
  return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  auto fail = [&](const std::string& kind, const std::string& message, int code) {
    err << Json{{"error", kind}, {"message", message}}.dump() << '\n';
    return code;
  };
  if (argv.empty()) return fail("usage", "missing program name", 2);
  try {
    return dispatch(argv, out);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  } catch (const Error& e) {
    return fail(e.kind(), e.what(), 1);
  } catch (const Json::exception& e) {
    return fail("format", e.what(), 1);
  } catch (const fs::filesystem_error& e) {
    return fail("io", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
}

}  // namespace scatsep
