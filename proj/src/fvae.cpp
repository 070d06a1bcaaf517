#include "scatsep/fvae.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <numeric>
#include <sstream>

#include "scatsep/errors.hpp"
#include "scatsep/scatcov.hpp"

namespace scatsep {

using diff::Axis;
using diff::NodeId;
using diff::Shape;
using diff::Tape;

// ---- config ----------------------------------------------------------------

std::size_t FvaeConfig::input_width() const noexcept {
  return std::accumulate(d_in.begin(), d_in.end(), std::size_t{0});
}

double FvaeConfig::tau_at(std::size_t epoch) const {
  return std::max(tau_min, tau0 * std::exp(-tau_decay * static_cast<double>(epoch)));
}

void FvaeConfig::validate() const {
  if (d_in.empty()) throw InvalidArgument("fvae needs at least one scale");
  if (clusters.size() != d_in.size())
    throw InvalidArgument("cluster counts (" + std::to_string(clusters.size()) + ") do not match scales (" +
                          std::to_string(d_in.size()) + ")");
  for (std::size_t c : clusters)
    if (c < 1) throw InvalidArgument("every scale needs at least one cluster");
  for (std::size_t d : d_in)
    if (d < 1) throw InvalidArgument("feature widths must be positive");
  if (latent < 1) throw InvalidArgument("latent dimension must be at least 1");
  if (hidden < 1) throw InvalidArgument("hidden width must be at least 1");
  if (batch < 1) throw InvalidArgument("batch size must be at least 1");
  if (!(tau_min > 0.0) || tau_min > tau0) throw InvalidArgument("need 0 < tau_min <= tau0");
  if (tau_decay < 0.0) throw InvalidArgument("tau_decay must be >= 0");
  if (lr < 0.0) throw InvalidArgument("learning rate must be >= 0");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw InvalidArgument("batchnorm momentum must be in [0, 1)");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw InvalidArgument("validation fraction must be in [0, 1)");
}

Json FvaeConfig::to_json() const {
  return {{"d_in", d_in},         {"clusters", clusters},       {"hidden", hidden},
          {"latent", latent},     {"n_joint_blocks", n_joint_blocks}, {"lr", lr},
          {"epochs", epochs},     {"batch", batch},             {"tau0", tau0},
          {"tau_min", tau_min},   {"tau_decay", tau_decay},     {"leaky_slope", leaky_slope},
          {"bn_momentum", bn_momentum}, {"val_fraction", val_fraction}, {"seed", seed}};
}

FvaeConfig FvaeConfig::from_json(const Json& j) {
  FvaeConfig c;
  c.d_in = j.at("d_in").get<std::vector<std::size_t>>();
  c.clusters = j.at("clusters").get<std::vector<std::size_t>>();
  c.hidden = j.at("hidden");
  c.latent = j.at("latent");
  c.n_joint_blocks = j.at("n_joint_blocks");
  c.lr = j.at("lr");
  c.epochs = j.at("epochs");
  c.batch = j.at("batch");
  c.tau0 = j.at("tau0");
  c.tau_min = j.at("tau_min");
  c.tau_decay = j.at("tau_decay");
  c.leaky_slope = j.at("leaky_slope");
  c.bn_momentum = j.at("bn_momentum");
  c.val_fraction = j.at("val_fraction");
  c.seed = j.at("seed");
  return c;
}

// ---- parameters ------------------------------------------------------------

namespace {

enum class Init { Uniform, Ones, Zeros, Normal };

struct Spec {
  std::string name;
  Shape shape;
  Init init;
  std::size_t fan_in;
};

std::vector<Spec> param_specs(const FvaeConfig& c) {
  const std::size_t H = c.hidden, L = c.latent, D = c.input_width();
  std::vector<Spec> s;
  auto dense = [&](const std::string& name, std::size_t out, std::size_t in) {
    s.push_back({name + ".w", {out, in}, Init::Uniform, in});
    s.push_back({name + ".b", {1, out}, Init::Uniform, in});
  };
  auto bn = [&](const std::string& name, std::size_t width) {
    s.push_back({name + ".gamma", {1, width}, Init::Ones, 0});
    s.push_back({name + ".beta", {1, width}, Init::Zeros, 0});
  };
  dense("enc.in", H, D);
  bn("enc.in.bn", H);
  for (std::size_t k = 0; k < c.n_joint_blocks; ++k) {
    dense("enc.block" + std::to_string(k), H, H);
    bn("enc.block" + std::to_string(k) + ".bn", H);
  }
  for (std::size_t i = 0; i < c.scales(); ++i) {
    const std::string h = "head" + std::to_string(i);
    const std::size_t C = c.clusters[i];
    dense(h + ".feat", H, H);
    dense(h + ".logits", C, H);
    dense(h + ".z1", H, H + C);
    dense(h + ".zmu", L, H);
    dense(h + ".zlv", L, H);
    const std::string p = "prior" + std::to_string(i);
    s.push_back({p + ".mu", {C, L}, Init::Normal, 0});
    s.push_back({p + ".logvar", {C, L}, Init::Zeros, 0});
    const std::string d = "dec" + std::to_string(i);
    dense(d + ".l1", H, L);
    dense(d + ".l2", H, H);
    dense(d + ".out", c.d_in[i], H);
    s.push_back({d + ".logvar", {1, c.d_in[i]}, Init::Zeros, 0});
  }
  return s;
}

std::vector<std::string> bn_names(const FvaeConfig& c) {
  std::vector<std::string> v{"enc.in.bn"};
  for (std::size_t k = 0; k < c.n_joint_blocks; ++k) v.push_back("enc.block" + std::to_string(k) + ".bn");
  return v;
}

Param* find(std::vector<Param>& v, const std::string& name) {
  for (Param& p : v)
    if (p.name == name) return &p;
  return nullptr;
}

}  // namespace

Param& FvaeModel::param(const std::string& name) {
  if (Param* p = find(params, name)) return *p;
  throw InvalidArgument("model has no parameter '" + name + "'");
}

const Param& FvaeModel::param(const std::string& name) const { return const_cast<FvaeModel*>(this)->param(name); }

Param& FvaeModel::buffer(const std::string& name) {
  if (Param* p = find(buffers, name)) return *p;
  throw InvalidArgument("model has no buffer '" + name + "'");
}

std::size_t FvaeModel::parameter_count() const {
  std::size_t n = 0;
  for (const Param& p : params) n += p.value.size();
  return n;
}

std::vector<double> FvaeModel::flat_params() const {
  std::vector<double> v;
  v.reserve(parameter_count());
  for (const Param& p : params) v.insert(v.end(), p.value.begin(), p.value.end());
  return v;
}

void FvaeModel::set_flat_params(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw SizingError("flat parameter vector has the wrong length");
  std::size_t o = 0;
  for (Param& p : params) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(o),
              flat.begin() + static_cast<std::ptrdiff_t>(o + p.value.size()), p.value.begin());
    o += p.value.size();
  }
}

FeatureMatrix FeatureMatrix::subset(std::span<const std::size_t> idx) const {
  FeatureMatrix out;
  out.rows = idx.size();
  out.u.resize(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    const std::size_t d = rows ? u[i].size() / rows : 0;
    out.u[i].reserve(idx.size() * d);
    for (std::size_t r : idx) {
      if (r >= rows) throw SizingError("feature row index out of range");
      out.u[i].insert(out.u[i].end(), u[i].begin() + static_cast<std::ptrdiff_t>(r * d),
                      u[i].begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    }
  }
  return out;
}

FvaeModel init_model(const FvaeConfig& config, std::mt19937_64& rng) {
  config.validate();
  FvaeModel m;
  m.config = config;
  std::normal_distribution<double> nd;
  for (const Spec& s : param_specs(config)) {
    Param p{s.name, s.shape, std::vector<double>(s.shape.size())};
    switch (s.init) {
      case Init::Uniform: {
        const double a = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
        std::uniform_real_distribution<double> ud(-a, a);
        for (double& v : p.value) v = ud(rng);
        break;
      }
      case Init::Ones: std::fill(p.value.begin(), p.value.end(), 1.0); break;
      case Init::Zeros: break;
      case Init::Normal:
        for (double& v : p.value) v = nd(rng);
        break;
    }
    m.params.push_back(std::move(p));
  }
  for (const std::string& b : bn_names(config)) {
    m.buffers.push_back({b + ".running_mean", {1, config.hidden}, std::vector<double>(config.hidden, 0.0)});
    m.buffers.push_back({b + ".running_var", {1, config.hidden}, std::vector<double>(config.hidden, 1.0)});
  }
  for (std::size_t d : config.d_in) {
    m.feat_mean.emplace_back(d, 0.0);
    m.feat_std.emplace_back(d, 1.0);
  }
  return m;
}

FvaeModel init_model(const FvaeConfig& config) {
  std::mt19937_64 rng(config.seed);
  return init_model(config, rng);
}

// ---- graph -----------------------------------------------------------------

namespace {

void check_batch(const FvaeConfig& c, const FeatureMatrix& b) {
  if (b.u.size() != c.scales())
    throw SizingError("batch has " + std::to_string(b.u.size()) + " scales, model has " +
                      std::to_string(c.scales()));
  for (std::size_t i = 0; i < c.scales(); ++i)
    if (b.u[i].size() != b.rows * c.d_in[i])
      throw SizingError("scale " + std::to_string(i) + " features have " + std::to_string(b.u[i].size()) +
                        " values, expected " + std::to_string(b.rows) + " x " + std::to_string(c.d_in[i]));
}

std::vector<std::vector<double>> standardize(const FvaeModel& m, const FeatureMatrix& b) {
  std::vector<std::vector<double>> out(b.u.size());
  for (std::size_t i = 0; i < b.u.size(); ++i) {
    const std::size_t d = m.config.d_in[i];
    out[i].resize(b.u[i].size());
    for (std::size_t r = 0; r < b.rows; ++r)
      for (std::size_t k = 0; k < d; ++k)
        out[i][r * d + k] = (b.u[i][r * d + k] - m.feat_mean[i][k]) / m.feat_std[i][k];
  }
  return out;
}

enum class Stage { Full, Logits };

struct Net {
  std::vector<NodeId> bn, rm, rv;
  std::vector<NodeId> u, gumbel, eps;
  NodeId inv_tau;
  std::vector<NodeId> probs, recon, kl_cat, kl_gauss;
  NodeId total;
};

using ParamNode = std::function<NodeId(std::size_t)>;

Net build_net(Tape& t, const FvaeConfig& c, std::size_t B, BatchNormMode mode, Stage stage, const ParamNode& pn) {
  const auto specs = param_specs(c);
  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < specs.size(); ++k) index[specs[k].name] = k;
  auto P = [&](const std::string& name) { return pn(index.at(name)); };
  auto act = [&](NodeId x) { return t.leaky_relu(x, c.leaky_slope); };
  auto dense = [&](NodeId x, const std::string& name) { return t.affine(x, P(name + ".w"), P(name + ".b")); };

  const std::size_t H = c.hidden, L = c.latent;
  const bool training = mode == BatchNormMode::Train;
  Net net;
  auto norm = [&](NodeId x, const std::string& name) {
    const NodeId rm = t.input({1, H}, name + ".running_mean");
    const NodeId rv = t.input({1, H}, name + ".running_var");
    const NodeId y = t.batch_norm(x, P(name + ".gamma"), P(name + ".beta"), rm, rv, training);
    net.bn.push_back(y);
    net.rm.push_back(rm);
    net.rv.push_back(rv);
    return y;
  };

  for (std::size_t i = 0; i < c.scales(); ++i) net.u.push_back(t.input({B, c.d_in[i]}, "u" + std::to_string(i)));
  NodeId h = act(norm(dense(t.concat_cols(net.u), "enc.in"), "enc.in.bn"));
  for (std::size_t k = 0; k < c.n_joint_blocks; ++k) {
    const std::string b = "enc.block" + std::to_string(k);
    h = t.add(h, act(norm(dense(h, b), b + ".bn")));
  }

  if (stage == Stage::Full) net.inv_tau = t.input({1, 1}, "inv_tau");
  std::vector<NodeId> terms;
  for (std::size_t i = 0; i < c.scales(); ++i) {
    const std::string hn = "head" + std::to_string(i);
    const std::size_t C = c.clusters[i];
    const NodeId e = act(dense(h, hn + ".feat"));
    const NodeId logits = dense(e, hn + ".logits");
    const NodeId p = t.softmax(logits);
    net.probs.push_back(p);
    if (stage == Stage::Logits) continue;

    const NodeId logp = t.log_softmax(logits);
    const double inv_b = 1.0 / static_cast<double>(B);
    const NodeId kl_cat =
        t.scale(t.sum_all(t.mul(p, t.scale(logp, 1.0, std::log(static_cast<double>(C))))), inv_b);

    // Relaxed sample feeds the z-head for the reconstruction path.
    const NodeId g = t.input({B, C}, "gumbel" + std::to_string(i));
    const NodeId eps = t.input({B, L}, "eps" + std::to_string(i));
    net.gumbel.push_back(g);
    net.eps.push_back(eps);
    const NodeId y_soft = t.softmax(t.mul(t.add(logp, g), net.inv_tau));
    auto z_head = [&](NodeId feats, NodeId y) {
      const NodeId parts[2] = {feats, y};
      const NodeId hz = act(dense(t.concat_cols(parts), hn + ".z1"));
      return std::pair{dense(hz, hn + ".zmu"), t.clamp(dense(hz, hn + ".zlv"), kLogVarMin, kLogVarMax)};
    };
    const auto [mu_q, lv_q] = z_head(e, y_soft);
    const NodeId z = t.add(mu_q, t.mul(t.exp(t.scale(lv_q, 0.5)), eps));

    const std::string dn = "dec" + std::to_string(i);
    const NodeId mu_u = dense(act(dense(act(dense(z, dn + ".l1")), dn + ".l2")), dn + ".out");
    const NodeId lv_u = t.clamp(P(dn + ".logvar"), kLogVarMin, kLogVarMax);
    const double d = static_cast<double>(c.d_in[i]);
    const NodeId sq = t.mul(t.square(t.sub(net.u[i], mu_u)), t.exp(t.neg(lv_u)));
    const NodeId recon = t.add(t.scale(t.sum_all(sq), 0.5 * inv_b),
                               t.scale(t.sum_all(lv_u), 0.5, 0.5 * d * std::log(2.0 * std::numbers::pi)));

    // Gaussian KL for every component, weighted by the mixture probabilities.
    std::vector<std::size_t> rows_b(B * C), rows_y(B * C);
    std::vector<double> onehot(B * C * C, 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t y = 0; y < C; ++y) {
        rows_b[b * C + y] = b;
        rows_y[b * C + y] = y;
        onehot[(b * C + y) * C + y] = 1.0;
      }
    const auto [mu_all, lv_all] = z_head(t.gather_rows(e, rows_b), t.constant({B * C, C}, std::move(onehot)));
    const std::string pr = "prior" + std::to_string(i);
    const NodeId mu_p = t.gather_rows(P(pr + ".mu"), rows_y);
    const NodeId lv_p = t.clamp(t.gather_rows(P(pr + ".logvar"), std::move(rows_y)), kLogVarMin, kLogVarMax);
    const NodeId inner = t.add(t.sub(lv_p, lv_all),
                               t.mul(t.add(t.exp(lv_all), t.square(t.sub(mu_all, mu_p))), t.exp(t.neg(lv_p))));
    const NodeId kl_rows = t.scale(t.sum(inner, Axis::Cols), 0.5, -0.5 * static_cast<double>(L));
    std::vector<std::size_t> iota(B * C);
    std::iota(iota.begin(), iota.end(), std::size_t{0});
    const NodeId kl_mat = t.gather(kl_rows, std::move(iota), {B, C});
    const NodeId kl_gauss = t.scale(t.sum_all(t.mul(p, kl_mat)), inv_b);

    net.recon.push_back(recon);
    net.kl_cat.push_back(kl_cat);
    net.kl_gauss.push_back(kl_gauss);
    terms.insert(terms.end(), {recon, kl_cat, kl_gauss});
  }
  if (stage == Stage::Full) {
    NodeId total = terms.front();
    for (std::size_t k = 1; k < terms.size(); ++k) total = t.add(total, terms[k]);
    net.total = total;
  }
  return net;
}

void bind_inputs(Tape& t, const Net& net, const FvaeModel& m, const std::vector<std::vector<double>>& u_std,
                 const ElboNoise* noise, double tau) {
  for (std::size_t i = 0; i < net.u.size(); ++i) t.bind(net.u[i], u_std[i]);
  for (std::size_t k = 0; k < net.bn.size(); ++k) {
    t.bind(net.rm[k], m.buffers[2 * k].value);
    t.bind(net.rv[k], m.buffers[2 * k + 1].value);
  }
  if (noise) {
    for (std::size_t i = 0; i < net.gumbel.size(); ++i) {
      t.bind(net.gumbel[i], noise->gumbel[i]);
      t.bind(net.eps[i], noise->eps[i]);
    }
    const double inv = 1.0 / tau;
    t.bind(net.inv_tau, std::span<const double>(&inv, 1));
  }
}

void check_noise(const FvaeConfig& c, const ElboNoise& n, std::size_t rows) {
  if (n.gumbel.size() != c.scales() || n.eps.size() != c.scales()) throw SizingError("noise has the wrong scale count");
  for (std::size_t i = 0; i < c.scales(); ++i)
    if (n.gumbel[i].size() != rows * c.clusters[i] || n.eps[i].size() != rows * c.latent)
      throw SizingError("noise shape does not match the batch");
}

ElboTerms read_terms(const Tape& t, const Net& net) {
  ElboTerms e;
  for (std::size_t i = 0; i < net.recon.size(); ++i) {
    e.recon.push_back(t.scalar_value(net.recon[i]));
    e.kl_cat.push_back(t.scalar_value(net.kl_cat[i]));
    e.kl_gauss.push_back(t.scalar_value(net.kl_gauss[i]));
  }
  e.total = t.scalar_value(net.total);
  return e;
}

struct LeafGraph {
  Tape tape;
  std::vector<NodeId> leaves;
  Net net;
};

std::unique_ptr<LeafGraph> leaf_graph(const FvaeModel& m, std::size_t B, BatchNormMode mode, Stage stage) {
  auto g = std::make_unique<LeafGraph>();
  for (const Param& p : m.params) g->leaves.push_back(g->tape.leaf(p.shape, p.name));
  g->net = build_net(g->tape, m.config, B, mode, stage, [&](std::size_t k) { return g->leaves[k]; });
  return g;
}

void bind_params(LeafGraph& g, const FvaeModel& m) {
  for (std::size_t k = 0; k < m.params.size(); ++k) g.tape.bind(g.leaves[k], m.params[k].value);
}

}  // namespace

ElboNoise draw_noise(const FvaeConfig& c, std::size_t rows, std::mt19937_64& rng) {
  ElboNoise n;
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  std::normal_distribution<double> nd;
  for (std::size_t i = 0; i < c.scales(); ++i) {
    std::vector<double> g(rows * c.clusters[i]);
    for (double& v : g) {
      double u = ud(rng);
      if (u <= 0.0) u = std::numeric_limits<double>::min();
      v = -std::log(-std::log(u));
    }
    std::vector<double> e(rows * c.latent);
    for (double& v : e) v = nd(rng);
    n.gumbel.push_back(std::move(g));
    n.eps.push_back(std::move(e));
  }
  return n;
}

ElboTerms elbo_terms(const FvaeModel& m, const FeatureMatrix& batch, double tau, const ElboNoise& noise,
                     std::span<double> grad, BatchNormMode mode) {
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
  check_batch(m.config, batch);
  check_noise(m.config, noise, batch.rows);
  if (batch.rows == 0) throw InvalidArgument("empty batch");
  if (!grad.empty() && grad.size() != m.parameter_count()) throw SizingError("gradient buffer has the wrong length");
  auto g = leaf_graph(m, batch.rows, mode, Stage::Full);
  bind_params(*g, m);
  bind_inputs(g->tape, g->net, m, standardize(m, batch), &noise, tau);
  g->tape.forward();
  const ElboTerms e = read_terms(g->tape, g->net);
  if (!grad.empty()) {
    g->tape.backward(g->net.total);
    std::size_t o = 0;
    for (std::size_t k = 0; k < m.params.size(); ++k) {
      const auto gk = g->tape.grad(g->leaves[k]);
      std::copy(gk.begin(), gk.end(), grad.begin() + static_cast<std::ptrdiff_t>(o));
      o += gk.size();
    }
  }
  return e;
}

ElboTerms elbo_terms(const FvaeModel& m, const FeatureMatrix& batch, double tau, std::mt19937_64& rng,
                     BatchNormMode mode) {
  return elbo_terms(m, batch, tau, draw_noise(m.config, batch.rows, rng), {}, mode);
}

NodeId record_elbo(Tape& t, NodeId point, const FvaeModel& m, const FeatureMatrix& batch, double tau,
                   const ElboNoise& noise, BatchNormMode mode) {
  check_batch(m.config, batch);
  check_noise(m.config, noise, batch.rows);
  if (t.shape(point).size() != m.parameter_count()) throw SizingError("point does not match the parameter count");
  std::vector<std::size_t> offsets{0};
  for (const Param& p : m.params) offsets.push_back(offsets.back() + p.value.size());
  const Net net = build_net(t, m.config, batch.rows, mode, Stage::Full, [&](std::size_t k) {
    std::vector<std::size_t> idx(m.params[k].value.size());
    std::iota(idx.begin(), idx.end(), offsets[k]);
    return t.gather(point, std::move(idx), m.params[k].shape);
  });
  bind_inputs(t, net, m, standardize(m, batch), &noise, tau);
  return net.total;
}

std::vector<double> gumbel_softmax(std::span<const double> logits, std::span<const double> gumbel, std::size_t width,
                                   double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
  if (width == 0 || logits.size() % width != 0 || gumbel.size() != logits.size())
    throw SizingError("logits and noise shapes do not match");
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r < logits.size() / width; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < width; ++k) mx = std::max(mx, (logits[r * width + k] + gumbel[r * width + k]) / tau);
    double s = 0.0;
    for (std::size_t k = 0; k < width; ++k) {
      out[r * width + k] = std::exp((logits[r * width + k] + gumbel[r * width + k]) / tau - mx);
      s += out[r * width + k];
    }
    for (std::size_t k = 0; k < width; ++k) out[r * width + k] /= s;
  }
  return out;
}

// ---- training --------------------------------------------------------------

namespace {

void fit_standardization(FvaeModel& m, const FeatureMatrix& f, std::span<const std::size_t> rows) {
  for (std::size_t i = 0; i < m.config.scales(); ++i) {
    const std::size_t d = m.config.d_in[i];
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    for (std::size_t r : rows)
      for (std::size_t k = 0; k < d; ++k) mean[k] += f.u[i][r * d + k];
    for (double& v : mean) v /= static_cast<double>(rows.size());
    for (std::size_t r : rows)
      for (std::size_t k = 0; k < d; ++k) {
        const double x = f.u[i][r * d + k] - mean[k];
        var[k] += x * x;
      }
    std::vector<double> sd(d);
    for (std::size_t k = 0; k < d; ++k) {
      const double s = std::sqrt(var[k] / static_cast<double>(rows.size()));
      sd[k] = s > 1e-12 * (1.0 + std::abs(mean[k])) ? s : 1.0;
    }
    m.feat_mean[i] = std::move(mean);
    m.feat_std[i] = std::move(sd);
  }
  m.standardized = true;
}

std::string describe(const ElboTerms& e) {
  std::ostringstream s;
  for (std::size_t i = 0; i < e.recon.size(); ++i)
    s << " scale " << i << ": recon " << e.recon[i] << ", kl_cat " << e.kl_cat[i] << ", kl_gauss " << e.kl_gauss[i]
      << ";";
  return s.str();
}

}  // namespace

TrainHistory train(FvaeModel& m, const FeatureMatrix& features, const EpochMonitor& monitor) {
  const FvaeConfig& c = m.config;
  c.validate();
  check_batch(c, features);
  if (features.rows == 0) throw InvalidArgument("training set is empty");

  std::mt19937_64 rng(c.seed ^ 0x5DEECE66DULL);
  TrainHistory hist;
  {
    std::vector<std::size_t> all(features.rows);
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::shuffle(all.begin(), all.end(), rng);
    std::size_t n_val = static_cast<std::size_t>(std::floor(c.val_fraction * static_cast<double>(features.rows)));
    if (features.rows - n_val < 2) n_val = 0;
    hist.val_rows.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_val));
    hist.train_rows.assign(all.begin() + static_cast<std::ptrdiff_t>(n_val), all.end());
    std::sort(hist.val_rows.begin(), hist.val_rows.end());
  }
  if (!m.standardized) fit_standardization(m, features, hist.train_rows);
  const FeatureMatrix val = features.subset(hist.val_rows);
  const auto val_std = standardize(m, val);

  const std::size_t n_params = m.params.size();
  std::vector<std::vector<double>> adam_m(n_params), adam_v(n_params);
  for (std::size_t k = 0; k < n_params; ++k) {
    adam_m[k].assign(m.params[k].value.size(), 0.0);
    adam_v[k].assign(m.params[k].value.size(), 0.0);
  }
  constexpr double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;

  std::map<std::size_t, std::unique_ptr<LeafGraph>> graphs;
  std::unique_ptr<LeafGraph> val_graph;
  std::vector<std::size_t> order = hist.train_rows;
  const std::size_t n_train = order.size();
  const std::size_t B = std::min(c.batch, n_train);

  for (std::size_t ep = 0; ep < c.epochs; ++ep) {
    const double tau = c.tau_at(m.epoch);
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats st;
    st.epoch = m.epoch;
    st.tau = tau;
    double weight = 0.0;
    for (std::size_t start = 0; start < n_train; start += B) {
      const std::size_t rows = std::min(B, n_train - start);
      if (rows < 2 && start > 0) break;  // a single-row batch has no batch statistics
      const FeatureMatrix batch = features.subset(std::span(order).subspan(start, rows));
      auto& g = graphs[rows];
      if (!g) g = leaf_graph(m, rows, BatchNormMode::Train, Stage::Full);
      const ElboNoise noise = draw_noise(c, rows, rng);
      bind_params(*g, m);
      bind_inputs(g->tape, g->net, m, standardize(m, batch), &noise, tau);
      g->tape.forward();
      const ElboTerms e = read_terms(g->tape, g->net);
      if (!std::isfinite(e.total))
        throw NumericalError("training loss is not finite at epoch " + std::to_string(m.epoch) + ":" + describe(e));
      g->tape.backward(g->net.total);

      ++m.step;
      const double t = static_cast<double>(m.step);
      const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
      for (std::size_t k = 0; k < n_params; ++k) {
        const auto gk = g->tape.grad(g->leaves[k]);
        auto& pv = m.params[k].value;
        for (std::size_t q = 0; q < pv.size(); ++q) {
          adam_m[k][q] = b1 * adam_m[k][q] + (1.0 - b1) * gk[q];
          adam_v[k][q] = b2 * adam_v[k][q] + (1.0 - b2) * gk[q] * gk[q];
          pv[q] -= c.lr * (adam_m[k][q] / c1) / (std::sqrt(adam_v[k][q] / c2) + adam_eps);
        }
      }
      const double unbias = rows > 1 ? static_cast<double>(rows) / static_cast<double>(rows - 1) : 1.0;
      for (std::size_t k = 0; k < g->net.bn.size(); ++k) {
        const auto mean = g->tape.batch_mean(g->net.bn[k]);
        const auto var = g->tape.batch_var(g->net.bn[k]);
        auto& rm = m.buffers[2 * k].value;
        auto& rv = m.buffers[2 * k + 1].value;
        for (std::size_t q = 0; q < rm.size(); ++q) {
          rm[q] = c.bn_momentum * rm[q] + (1.0 - c.bn_momentum) * mean[q];
          rv[q] = c.bn_momentum * rv[q] + (1.0 - c.bn_momentum) * var[q] * unbias;
        }
      }

      const double w = static_cast<double>(rows);
      weight += w;
      st.train_total += w * e.total;
      for (std::size_t i = 0; i < e.recon.size(); ++i) {
        st.recon += w * e.recon[i];
        st.kl_cat += w * e.kl_cat[i];
        st.kl_gauss += w * e.kl_gauss[i];
      }
    }
    st.train_total /= weight;
    st.recon /= weight;
    st.kl_cat /= weight;
    st.kl_gauss /= weight;

    st.val_total = std::numeric_limits<double>::quiet_NaN();
    if (val.rows > 0) {
      if (!val_graph) val_graph = leaf_graph(m, val.rows, BatchNormMode::Eval, Stage::Full);
      std::mt19937_64 vrng(c.seed + 7919 * (m.epoch + 1));
      const ElboNoise noise = draw_noise(c, val.rows, vrng);
      bind_params(*val_graph, m);
      bind_inputs(val_graph->tape, val_graph->net, m, val_std, &noise, tau);
      val_graph->tape.forward();
      st.val_total = val_graph->tape.scalar_value(val_graph->net.total);
    }
    ++m.epoch;
    hist.epochs.push_back(st);
    if (monitor) monitor(st);
  }
  return hist;
}

// ---- inference -------------------------------------------------------------

ClusterAssignment assign_clusters(const FvaeModel& m, const FeatureMatrix& u, std::span<const double> end_times) {
  check_batch(m.config, u);
  if (!end_times.empty() && end_times.size() != u.rows) throw SizingError("end times do not match the row count");
  ClusterAssignment a;
  a.end_time.assign(end_times.begin(), end_times.end());
  const std::size_t S = m.config.scales();
  a.probs.resize(S);
  a.labels.resize(S);
  a.confidence.resize(S);
  if (u.rows == 0) return a;
  auto g = leaf_graph(m, u.rows, BatchNormMode::Eval, Stage::Logits);
  bind_params(*g, m);
  bind_inputs(g->tape, g->net, m, standardize(m, u), nullptr, 1.0);
  g->tape.forward();
  for (std::size_t i = 0; i < S; ++i) {
    const auto p = g->tape.value(g->net.probs[i]);
    const std::size_t C = m.config.clusters[i];
    a.probs[i].assign(p.begin(), p.end());
    for (std::size_t r = 0; r < u.rows; ++r) {
      const auto row = p.subspan(r * C, C);
      const auto it = std::max_element(row.begin(), row.end());
      a.labels[i].push_back(static_cast<int>(it - row.begin()));
      a.confidence[i].push_back(*it);
    }
  }
  return a;
}

std::vector<double> decode(const FvaeModel& m, std::size_t scale, std::span<const double> z) {
  const FvaeConfig& c = m.config;
  if (scale >= c.scales()) throw InvalidArgument("scale index out of range");
  if (z.size() % c.latent != 0) throw SizingError("latent rows do not match the latent width");
  const std::size_t n = z.size() / c.latent;
  if (n == 0) return {};
  Tape t;
  const std::string dn = "dec" + std::to_string(scale);
  auto cst = [&](const std::string& name) {
    const Param& p = m.param(name);
    return t.constant(p.shape, p.value);
  };
  auto dense = [&](NodeId x, const std::string& name) { return t.affine(x, cst(name + ".w"), cst(name + ".b")); };
  auto act = [&](NodeId x) { return t.leaky_relu(x, c.leaky_slope); };
  const NodeId zi = t.input({n, c.latent}, "z");
  const NodeId out = dense(act(dense(act(dense(zi, dn + ".l1")), dn + ".l2")), dn + ".out");
  t.bind(zi, z);
  t.forward();
  const auto v = t.value(out);
  return {v.begin(), v.end()};
}

std::vector<double> sample_cluster_representation(const FvaeModel& m, std::size_t scale, std::size_t cluster,
                                                  std::size_t n, std::mt19937_64& rng) {
  const FvaeConfig& c = m.config;
  if (scale >= c.scales()) throw InvalidArgument("scale index out of range");
  if (cluster >= c.clusters[scale])
    throw InvalidArgument("cluster " + std::to_string(cluster) + " out of range for scale " + std::to_string(scale) +
                          " with " + std::to_string(c.clusters[scale]) + " clusters");
  if (n == 0) return {};
  const Param& mu = m.param("prior" + std::to_string(scale) + ".mu");
  const Param& lv = m.param("prior" + std::to_string(scale) + ".logvar");
  const std::size_t L = c.latent;
  std::normal_distribution<double> nd;
  std::vector<double> z(n * L);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < L; ++k) {
      const double s = std::exp(0.5 * std::clamp(lv.value[cluster * L + k], kLogVarMin, kLogVarMax));
      z[r * L + k] = mu.value[cluster * L + k] + s * nd(rng);
    }
  std::vector<double> u = decode(m, scale, z);
  const std::size_t d = c.d_in[scale];
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < d; ++k) u[r * d + k] = u[r * d + k] * m.feat_std[scale][k] + m.feat_mean[scale][k];
  return u;
}

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(const FvaeModel& m, const std::filesystem::path& path) {
  Container c;
  c.kind = "fvae_checkpoint";
  c.meta = {{"config", m.config.to_json()},
            {"ordering_version", ScatCovLayout::kOrderingVersion},
            {"epoch", m.epoch},
            {"step", m.step},
            {"standardized", m.standardized},
            {"observation_noise", "learned_per_coordinate"}};
  for (const Param& p : m.params) c.blobs.push_back({"param/" + p.name, DType::F64, {p.shape.rows, p.shape.cols}, p.value});
  for (const Param& p : m.buffers)
    c.blobs.push_back({"buffer/" + p.name, DType::F64, {p.shape.rows, p.shape.cols}, p.value});
  for (std::size_t i = 0; i < m.feat_mean.size(); ++i) {
    c.blobs.push_back({"feat_mean/" + std::to_string(i), DType::F64, {m.feat_mean[i].size()}, m.feat_mean[i]});
    c.blobs.push_back({"feat_std/" + std::to_string(i), DType::F64, {m.feat_std[i].size()}, m.feat_std[i]});
  }
  write_container(path, c);
}

FvaeModel load_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path, "fvae_checkpoint");
  if (c.meta.at("ordering_version").get<int>() != ScatCovLayout::kOrderingVersion)
    throw FormatError(path.string() + ": feature ordering version mismatch");
  FvaeModel m = init_model(FvaeConfig::from_json(c.meta.at("config")));
  m.epoch = c.meta.at("epoch");
  m.step = c.meta.at("step");
  m.standardized = c.meta.at("standardized");
  auto load = [&](Param& p, const std::string& name) {
    const Blob& b = c.blob(name);
    if (b.data.size() != p.value.size()) throw FormatError(path.string() + ": blob '" + name + "' has the wrong size");
    p.value = b.data;
  };
  for (Param& p : m.params) load(p, "param/" + p.name);
  for (Param& p : m.buffers) load(p, "buffer/" + p.name);
  for (std::size_t i = 0; i < m.feat_mean.size(); ++i) {
    m.feat_mean[i] = c.blob("feat_mean/" + std::to_string(i)).data;
    m.feat_std[i] = c.blob("feat_std/" + std::to_string(i)).data;
  }
  return m;
}

}  // namespace scatsep
