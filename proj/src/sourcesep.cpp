#include "scatsep/sourcesep.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "scatsep/errors.hpp"
#include "scatsep/parallel.hpp"

namespace scatsep {

using diff::Axis;
using diff::NodeId;
using diff::Seed;
using diff::Shape;
using diff::Tape;

namespace {

void check_problem(std::size_t n, const std::vector<std::vector<double>>& snippets, const FilterBank& bank,
                   std::size_t window) {
  if (window != bank.length())
    throw SizingError("window " + std::to_string(window) + " does not match bank length " +
                      std::to_string(bank.length()));
  if (window < (std::size_t{1} << bank.octaves())) throw SizingError("window is shorter than 2^J");
  if (n == 0 || n % window != 0)
    throw SizingError("mixture length " + std::to_string(n) + " is not a positive multiple of " +
                      std::to_string(window));
  if (snippets.empty()) throw InvalidArgument("separation needs at least one snippet");
  for (std::size_t i = 0; i < snippets.size(); ++i)
    if (snippets[i].size() != window)
      throw SizingError("snippet " + std::to_string(i) + " has " + std::to_string(snippets[i].size()) +
                        " samples, expected " + std::to_string(window));
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

std::vector<double> repeat_rows(std::span<const double> row, std::size_t times) {
  std::vector<double> out;
  out.reserve(row.size() * times);
  for (std::size_t t = 0; t < times; ++t) out.insert(out.end(), row.begin(), row.end());
  return out;
}

// T rows of snippets starting at i: all equal to snippet i, or cyclic.
std::vector<double> snippet_rows(const std::vector<std::vector<double>>& snippets, std::size_t i, std::size_t T,
                                 SnippetPairing pairing) {
  if (pairing == SnippetPairing::Broadcast) return repeat_rows(snippets[i], T);
  std::vector<double> out;
  out.reserve(T * snippets[i].size());
  for (std::size_t t = 0; t < T; ++t) {
    const auto& s = snippets[(i + t) % snippets.size()];
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

// Snippets are reduced in groups of this size, independent of the worker count.
constexpr std::size_t kGroup = 8;

}  // namespace

SnippetStats snippet_stats(std::span<const double> x, const std::vector<std::vector<double>>& snippets,
                           const FilterBank& bank, std::size_t window, SnippetPairing pairing) {
  check_problem(x.size(), snippets, bank, window);
  auto shared = std::make_shared<const FilterBank>(bank);
  const std::size_t T = x.size() / window;
  const std::size_t F = ScatCovLayout(bank.octaves()).flat_length();
  const std::size_t N = snippets.size();

  SnippetStats st;
  {
    ScatCovEngine e(shared, T);
    st.psi_x = average_tiles(e.compute(x), F);
  }
  st.psi_s.resize(N);
  st.psi_xs.resize(N);
  st.psi_sx.resize(N);

  const std::size_t workers = std::min(default_workers(), N);
  struct Engines {
    std::unique_ptr<ScatCovEngine> one, tiled, cross;
  };
  std::vector<Engines> per(workers);
  parallel_for(N, workers, [&](std::size_t i, std::size_t w) {
    Engines& e = per[w];
    if (!e.one) {
      e.one = std::make_unique<ScatCovEngine>(shared, 1);
      e.tiled = std::make_unique<ScatCovEngine>(shared, T);
      e.cross = std::make_unique<ScatCovEngine>(shared, T, true, T);
    }
    st.psi_s[i] = e.one->compute(snippets[i]);
    const std::vector<double> rows = snippet_rows(snippets, i, T, pairing);
    std::vector<double> xs(x.begin(), x.end());
    for (std::size_t k = 0; k < xs.size(); ++k) xs[k] += rows[k];
    st.psi_xs[i] = average_tiles(e.tiled->compute(xs), F);
    st.psi_sx[i] = average_tiles(e.cross->compute(rows, x), F);
  });
  return st;
}

namespace {

std::vector<double> floored_variance(const std::vector<std::vector<double>>& rows, double floor_ratio) {
  const std::size_t N = rows.size();
  const std::size_t F = rows.front().size();
  std::vector<double> var(F, 0.0), mean(F, 0.0);
  for (const auto& r : rows)
    for (std::size_t f = 0; f < F; ++f) mean[f] += r[f];
  for (double& m : mean) m /= static_cast<double>(N);
  for (const auto& r : rows)
    for (std::size_t f = 0; f < F; ++f) var[f] += (r[f] - mean[f]) * (r[f] - mean[f]);
  for (double& v : var) v /= static_cast<double>(N - 1);

  auto median_positive = [](std::vector<double> v) {
    v.erase(std::remove_if(v.begin(), v.end(), [](double a) { return !(a > 0.0); }), v.end());
    if (v.empty()) return 0.0;
    auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
  };
  double ref = median_positive(var);
  if (ref == 0.0) {
    // All snippets agree: fall back to the coefficient magnitudes.
    std::vector<double> mag(F);
    for (std::size_t f = 0; f < F; ++f) mag[f] = mean[f] * mean[f];
    ref = median_positive(mag);
    if (ref == 0.0) ref = 1.0;
  }
  const double floor = floor_ratio * ref;
  for (double& v : var) v = std::max(v, floor);
  return var;
}

}  // namespace

Normalizers normalizers_from_stats(const SnippetStats& stats, double floor_ratio) {
  if (stats.psi_s.size() < 2) throw InvalidArgument("normalizers need at least two snippets");
  if (!(floor_ratio > 0.0)) throw InvalidArgument("normalizer floor ratio must be positive");
  Normalizers n;
  n.prior = floored_variance(stats.psi_s, floor_ratio);
  n.data = floored_variance(stats.psi_xs, floor_ratio);
  n.cross = floored_variance(stats.psi_sx, floor_ratio);
  return n;
}

Normalizers precompute_normalizers(std::span<const double> x, const std::vector<std::vector<double>>& snippets,
                                   const FilterBank& bank, std::size_t window, double floor_ratio,
                                   SnippetPairing pairing) {
  if (snippets.size() < 2) throw InvalidArgument("normalizers need at least two snippets");
  return normalizers_from_stats(snippet_stats(x, snippets, bank, window, pairing), floor_ratio);
}

// ---- problem ---------------------------------------------------------------

struct SeparationProblem::TopTape {
  Tape tape;
  NodeId s1, r_tiles, prior;
  std::vector<NodeId> sr;
};

struct SeparationProblem::WorkerTapes {
  Tape data;
  NodeId r, s, data_loss;
  Tape cross;
  std::vector<NodeId> sr, ss;
  NodeId cross_loss;
};

SeparationProblem::SeparationProblem(std::vector<double> x, std::vector<std::vector<double>> snippets,
                                     std::shared_ptr<const FilterBank> bank, const SeparationOptions& options)
    : x_(std::move(x)),
      snippets_(std::move(snippets)),
      bank_(std::move(bank)),
      layout_(bank_->octaves()),
      options_(options) {
  validate();
  stats_ = snippet_stats(x_, snippets_, *bank_, bank_->length(), options_.pairing);
  norm_ = normalizers_from_stats(stats_, options_.floor_ratio);
  build();
}

SeparationProblem::SeparationProblem(std::vector<double> x, std::vector<std::vector<double>> snippets,
                                     std::shared_ptr<const FilterBank> bank, Normalizers normalizers,
                                     const SeparationOptions& options)
    : x_(std::move(x)),
      snippets_(std::move(snippets)),
      bank_(std::move(bank)),
      layout_(bank_->octaves()),
      options_(options),
      norm_(std::move(normalizers)) {
  validate();
  const std::size_t F = layout_.flat_length();
  for (const auto* v : {&norm_.prior, &norm_.data, &norm_.cross}) {
    if (v->size() != F) throw SizingError("normalizer length does not match the coefficient count");
    for (double a : *v)
      if (!(a > 0.0) || !std::isfinite(a)) throw InvalidArgument("normalizers must be finite and positive");
  }
  stats_ = snippet_stats(x_, snippets_, *bank_, bank_->length(), options_.pairing);
  build();
}

SeparationProblem::~SeparationProblem() = default;

void SeparationProblem::validate() const {
  if (!bank_) throw InvalidArgument("separation needs a filter bank");
  check_problem(x_.size(), snippets_, *bank_, bank_->length());
}

void SeparationProblem::build() {
  const std::size_t L = bank_->length();
  const std::size_t T = tiles();
  const std::size_t N = snippets_.size();
  const std::size_t F = layout_.flat_length();

  inv_prior_.resize(F);
  inv_data_.resize(F);
  cross_weight_.resize(F);
  for (std::size_t f = 0; f < F; ++f) {
    inv_prior_[f] = 1.0 / norm_.prior[f];
    inv_data_[f] = 1.0 / norm_.data[f];
    cross_weight_[f] = 1.0 / norm_.cross[f];
  }
  for (std::size_t j = 0; j < layout_.n_psi1(); ++j) cross_weight_[layout_.off_psi1() + j] *= options_.cross_first_order_weight;

  // Scattering values of each snippet, concatenated in node-list order.
  {
    Tape t;
    const NodeId in = t.input({1, L}, "s");
    const auto list = scattering_node_list(record_scattering(t, in, *bank_, layout_));
    scat_s_.resize(N);
    scat_offsets_.assign(1, 0);
    for (NodeId n : list) scat_offsets_.push_back(scat_offsets_.back() + t.shape(n).size());
    for (std::size_t i = 0; i < N; ++i) {
      t.bind(in, snippets_[i]);
      t.forward();
      auto& dst = scat_s_[i];
      dst.clear();
      for (NodeId n : list) {
        const auto v = t.value(n);
        dst.insert(dst.end(), v.begin(), v.end());
      }
    }
  }

  top_ = std::make_unique<TopTape>();
  {
    Tape& t = top_->tape;
    top_->s1 = t.leaf({1, x_.size()}, "s1");
    const NodeId s1_tiles = t.gather(top_->s1, iota_indices(x_.size()), {T, L});
    const ScatNodes S1 = record_scattering(t, s1_tiles, *bank_, layout_);
    // Every tile of s1 against every snippet, averaged over tiles.
    const NodeId psi1 = record_covariance(t, S1, S1, layout_);
    std::vector<std::size_t> rows;
    std::vector<double> ps;
    rows.reserve(N * T);
    ps.reserve(N * T * F);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t r = 0; r < T; ++r) {
        rows.push_back(r);
        ps.insert(ps.end(), stats_.psi_s[i].begin(), stats_.psi_s[i].end());
      }
    const NodeId diff = t.sub(t.gather_rows(psi1, std::move(rows)), t.constant({N * T, F}, std::move(ps)));
    top_->prior = t.scale(t.sum_all(t.mul(t.square(diff), t.constant({1, F}, inv_prior_))),
                          1.0 / static_cast<double>(T));

    const NodeId xc = t.constant({1, x_.size()}, x_);
    const NodeId r = t.sub(xc, top_->s1);
    top_->r_tiles = t.gather(r, iota_indices(x_.size()), {T, L});
    top_->sr = scattering_node_list(record_scattering(t, top_->r_tiles, *bank_, layout_));
  }
  workers_.clear();
}

LossTerms SeparationProblem::evaluate(std::span<const double> s1, std::span<double> grad) {
  if (s1.size() != x_.size()) throw SizingError("candidate source length does not match the mixture");
  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != x_.size()) throw SizingError("gradient buffer length does not match");

  const std::size_t L = bank_->length();
  const std::size_t T = tiles();
  const std::size_t N = snippets_.size();
  const std::size_t F = layout_.flat_length();

  Tape& top = top_->tape;
  top.bind(top_->s1, s1);
  top.forward();
  LossTerms terms;
  terms.prior = top.scalar_value(top_->prior);

  const auto r_vals = top.value(top_->r_tiles);
  std::vector<std::span<const double>> sr_vals;
  std::size_t sr_total = 0;
  for (NodeId n : top_->sr) {
    sr_vals.push_back(top.value(n));
    sr_total += sr_vals.back().size();
  }

  const std::size_t P = options_.pairing == SnippetPairing::Cyclic ? T : 1;
  const std::size_t groups = (N + kGroup - 1) / kGroup;
  const std::size_t nworkers = std::min(options_.workers ? options_.workers : default_workers(), groups);
  while (workers_.size() < nworkers) workers_.push_back(nullptr);

  std::vector<double> data_loss(N), cross_loss(N);
  std::vector<std::vector<double>> g_data(want_grad ? groups : 0), g_cross(want_grad ? groups : 0);

  parallel_for(groups, nworkers, [&](std::size_t g, std::size_t w) {
    auto& wt = workers_[w];
    if (!wt) {
      wt = std::make_unique<WorkerTapes>();
      Tape& d = wt->data;
      wt->r = d.leaf({T, L}, "r");
      wt->s = d.input({P, L}, "s");
      const ScatNodes S = record_scattering(d, d.add(wt->r, wt->s), *bank_, layout_);
      const NodeId psi = d.mean(record_covariance(d, S, S, layout_), Axis::Rows);
      const NodeId diff = d.sub(psi, d.constant({1, F}, stats_.psi_x));
      wt->data_loss = d.sum_all(d.mul(d.square(diff), d.constant({1, F}, inv_data_)));

      Tape& c = wt->cross;
      const ScatNodes Sr = scattering_placeholders(c, T, L, layout_, true);
      const ScatNodes Ss = scattering_placeholders(c, P, L, layout_, false);
      wt->sr = scattering_node_list(Sr);
      wt->ss = scattering_node_list(Ss);
      const NodeId psi_c = c.mean(record_covariance(c, Ss, Sr, layout_), Axis::Rows);
      wt->cross_loss = c.sum_all(c.mul(c.square(psi_c), c.constant({1, F}, cross_weight_)));
    }
    if (want_grad) {
      g_data[g].assign(T * L, 0.0);
      g_cross[g].assign(sr_total, 0.0);
    }
    for (std::size_t k = 0; k < wt->sr.size(); ++k) wt->cross.bind(wt->sr[k], sr_vals[k]);
    wt->data.bind(wt->r, r_vals);

    std::vector<double> stacked;
    const std::size_t end = std::min(N, (g + 1) * kGroup);
    for (std::size_t i = g * kGroup; i < end; ++i) {
      if (P == 1) {
        wt->data.bind(wt->s, snippets_[i]);
      } else {
        wt->data.bind(wt->s, snippet_rows(snippets_, i, P, SnippetPairing::Cyclic));
      }
      wt->data.forward();
      data_loss[i] = wt->data.scalar_value(wt->data_loss);

      for (std::size_t k = 0; k < wt->ss.size(); ++k) {
        const std::size_t off = scat_offsets_[k], sz = scat_offsets_[k + 1] - off;
        if (P == 1) {
          wt->cross.bind(wt->ss[k], std::span<const double>(scat_s_[i]).subspan(off, sz));
        } else {
          stacked.resize(P * sz);
          for (std::size_t t = 0; t < P; ++t) {
            const auto& src = scat_s_[(i + t) % N];
            std::copy(src.begin() + static_cast<std::ptrdiff_t>(off),
                      src.begin() + static_cast<std::ptrdiff_t>(off + sz), stacked.begin() + static_cast<std::ptrdiff_t>(t * sz));
          }
          wt->cross.bind(wt->ss[k], stacked);
        }
      }
      wt->cross.forward();
      cross_loss[i] = wt->cross.scalar_value(wt->cross_loss);

      if (want_grad) {
        const double one = 1.0;
        const Seed sd{wt->data_loss, std::span<const double>(&one, 1)};
        wt->data.backward(std::span<const Seed>(&sd, 1));
        const auto gr = wt->data.grad(wt->r);
        for (std::size_t k = 0; k < gr.size(); ++k) g_data[g][k] += gr[k];

        const Seed sc{wt->cross_loss, std::span<const double>(&one, 1)};
        wt->cross.backward(std::span<const Seed>(&sc, 1));
        std::size_t o = 0;
        for (NodeId n : wt->sr) {
          const auto gn = wt->cross.grad(n);
          for (std::size_t k = 0; k < gn.size(); ++k) g_cross[g][o + k] += gn[k];
          o += gn.size();
        }
      }
    }
  });

  for (std::size_t i = 0; i < N; ++i) {
    terms.data += data_loss[i];
    terms.cross += cross_loss[i];
  }
  if (!std::isfinite(terms.total())) {
    std::ostringstream msg;
    msg << "separation loss is not finite (prior " << terms.prior << ", data " << terms.data << ", cross "
        << terms.cross << ")";
    throw NumericalError(msg.str());
  }
  if (!want_grad) return terms;

  for (std::size_t g = 1; g < groups; ++g) {
    for (std::size_t k = 0; k < g_data[0].size(); ++k) g_data[0][k] += g_data[g][k];
    for (std::size_t k = 0; k < g_cross[0].size(); ++k) g_cross[0][k] += g_cross[g][k];
  }
  const double one = 1.0;
  std::vector<Seed> seeds;
  seeds.push_back({top_->prior, std::span<const double>(&one, 1)});
  seeds.push_back({top_->r_tiles, g_data[0]});
  std::size_t off = 0;
  for (std::size_t k = 0; k < top_->sr.size(); ++k) {
    seeds.push_back({top_->sr[k], std::span<const double>(g_cross[0]).subspan(off, sr_vals[k].size())});
    off += sr_vals[k].size();
  }
  top.backward(seeds);
  const auto gs = top.grad(top_->s1);
  std::copy(gs.begin(), gs.end(), grad.begin());
  return terms;
}

// ---- drivers ---------------------------------------------------------------

namespace {

SeparationResult run(std::span<const double> x, std::vector<std::unique_ptr<SeparationProblem>>& problems,
                     const SeparationConfig& config, const LbfgsMonitor& monitor) {
  auto eval_all = [&](std::span<const double> s1, std::span<double> grad) {
    LossTerms sum;
    std::vector<double> g(grad.empty() ? 0 : grad.size());
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    for (auto& p : problems) {
      const LossTerms t = p->evaluate(s1, g);
      sum.prior += t.prior;
      sum.data += t.data;
      sum.cross += t.cross;
      for (std::size_t k = 0; k < g.size(); ++k) grad[k] += g[k];
    }
    return sum;
  };

  SeparationResult res;
  res.initial = eval_all(x, {});
  const Objective objective = [&](std::span<const double> s1, std::span<double> grad) {
    return eval_all(s1, grad).total();
  };
  LbfgsResult opt = lbfgs_minimize(objective, x, config.lbfgs, monitor);
  res.final_terms = eval_all(opt.x, {});
  res.s1_hat = std::move(opt.x);
  res.residual.resize(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) res.residual[k] = x[k] - res.s1_hat[k];
  res.trajectory = std::move(opt.trajectory);
  res.iterations = res.trajectory.empty() ? 0 : res.trajectory.size() - 1;
  res.status = opt.status;
  return res;
}

}  // namespace

SeparationResult separate(std::span<const double> x, const std::vector<std::vector<double>>& snippets,
                          std::shared_ptr<const FilterBank> bank, std::size_t window, const SeparationConfig& config,
                          const LbfgsMonitor& monitor) {
  if (!bank) throw InvalidArgument("separation needs a filter bank");
  check_problem(x.size(), snippets, *bank, window);
  std::vector<std::unique_ptr<SeparationProblem>> problems;
  problems.push_back(std::make_unique<SeparationProblem>(std::vector<double>(x.begin(), x.end()), snippets,
                                                         std::move(bank), config.options));
  return run(x, problems, config, monitor);
}

SeparationResult separate_multiscale(std::span<const double> x, const std::vector<ScaleTerm>& scales,
                                     const SeparationConfig& config, const LbfgsMonitor& monitor) {
  if (scales.empty()) throw InvalidArgument("multi-scale separation needs at least one scale");
  std::vector<std::unique_ptr<SeparationProblem>> problems;
  for (const auto& s : scales) {
    if (!s.bank) throw InvalidArgument("separation needs a filter bank");
    problems.push_back(std::make_unique<SeparationProblem>(std::vector<double>(x.begin(), x.end()), s.snippets,
                                                           s.bank, config.options));
  }
  return run(x, problems, config, monitor);
}

}  // namespace scatsep
