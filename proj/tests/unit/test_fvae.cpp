#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <vector>

#include <unistd.h>

#include "doctest.h"
#include "scatsep/errors.hpp"
#include "scatsep/fvae.hpp"

using namespace scatsep;

namespace {

FvaeConfig small_config() {
  FvaeConfig c;
  c.d_in = {5, 3};
  c.clusters = {3, 2};
  c.hidden = 8;
  c.latent = 2;
  c.n_joint_blocks = 1;
  c.batch = 16;
  c.epochs = 1;
  c.seed = 3;
  return c;
}

FeatureMatrix random_features(const FvaeConfig& c, std::size_t rows, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  FeatureMatrix f;
  f.rows = rows;
  for (std::size_t d : c.d_in) {
    std::vector<double> u(rows * d);
    for (double& v : u) v = nd(rng);
    f.u.push_back(std::move(u));
  }
  return f;
}

// Zero z-head output weights with biases equal to the prior rows makes
// q(z|x,y) match p(z|y) for every input.
void match_posterior_to_prior(FvaeModel& m) {
  for (std::size_t i = 0; i < m.config.scales(); ++i) {
    const std::string h = "head" + std::to_string(i);
    const std::string p = "prior" + std::to_string(i);
    auto& mu = m.param(p + ".mu").value;
    auto& lv = m.param(p + ".logvar").value;
    const std::size_t L = m.config.latent;
    for (std::size_t y = 0; y < m.config.clusters[i]; ++y)
      for (std::size_t k = 0; k < L; ++k) {
        mu[y * L + k] = 0.3 * static_cast<double>(k) - 0.1;
        lv[y * L + k] = -0.2 * static_cast<double>(k);
      }
    std::fill(m.param(h + ".zmu.w").value.begin(), m.param(h + ".zmu.w").value.end(), 0.0);
    std::fill(m.param(h + ".zlv.w").value.begin(), m.param(h + ".zlv.w").value.end(), 0.0);
    std::copy(mu.begin(), mu.begin() + static_cast<std::ptrdiff_t>(L), m.param(h + ".zmu.b").value.begin());
    std::copy(lv.begin(), lv.begin() + static_cast<std::ptrdiff_t>(L), m.param(h + ".zlv.b").value.begin());
  }
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("scatsep_fvae_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST_CASE("degenerate configuration runs") {
  FvaeConfig c;
  c.d_in = {1};
  c.clusters = {1};
  c.latent = 1;
  c.hidden = 2;
  c.n_joint_blocks = 0;
  c.epochs = 2;
  c.batch = 4;
  const FvaeModel m0 = init_model(c);
  FvaeModel m = m0;
  const auto f = random_features(c, 10, 1);
  const auto h = train(m, f);
  CHECK(h.epochs.size() == 2);
  for (const auto& e : h.epochs) CHECK(std::isfinite(e.train_total));
  const auto a = assign_clusters(m, f);
  for (double p : a.probs[0]) CHECK(p == doctest::Approx(1.0));
  std::mt19937_64 rng(1);
  const auto e = elbo_terms(m, f, 1.0, rng);
  CHECK(e.kl_cat[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("config validation") {
  FvaeConfig c = small_config();
  c.clusters = {3};
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = small_config();
  c.tau_min = 2.0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = small_config();
  c.latent = 0;
  CHECK_THROWS_AS(init_model(c), InvalidArgument);
  c = small_config();
  CHECK(c.tau_at(0) == 1.0);
  CHECK(c.tau_at(100000) == c.tau_min);
  CHECK(c.tau_at(10) == doctest::Approx(std::exp(-10 * c.tau_decay)));
  const FvaeConfig r = FvaeConfig::from_json(c.to_json());
  CHECK(r.to_json() == c.to_json());
}

TEST_CASE("same seed gives identical initialization") {
  const FvaeConfig c = small_config();
  const FvaeModel a = init_model(c), b = init_model(c);
  CHECK(a.flat_params() == b.flat_params());
  FvaeConfig d = c;
  d.seed = 4;
  CHECK(init_model(d).flat_params() != a.flat_params());
  for (double g : a.param("enc.in.bn.gamma").value) CHECK(g == 1.0);
  for (double v : a.param("prior0.logvar").value) CHECK(v == 0.0);
  CHECK(a.parameter_count() == a.flat_params().size());
}

TEST_CASE("uniform mixture probabilities give zero categorical KL") {
  FvaeModel m = init_model(small_config());
  for (std::size_t i = 0; i < 2; ++i) {
    auto& w = m.param("head" + std::to_string(i) + ".logits.w").value;
    auto& b = m.param("head" + std::to_string(i) + ".logits.b").value;
    std::fill(w.begin(), w.end(), 0.0);
    std::fill(b.begin(), b.end(), 0.7);
  }
  std::mt19937_64 rng(2);
  const auto e = elbo_terms(m, random_features(m.config, 12, 5), 0.8, rng);
  CHECK(e.kl_cat[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(e.kl_cat[1] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("posterior equal to the prior gives zero Gaussian KL") {
  FvaeModel m = init_model(small_config());
  match_posterior_to_prior(m);
  std::mt19937_64 rng(2);
  const auto e = elbo_terms(m, random_features(m.config, 9, 6), 0.8, rng);
  CHECK(e.kl_gauss[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(e.kl_gauss[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(e.kl_cat[0] > 0.0);
}

TEST_CASE("both KL terms are non-negative") {
  std::mt19937_64 rng(10);
  for (int draw = 0; draw < 100; ++draw) {
    FvaeConfig c = small_config();
    c.seed = static_cast<std::uint64_t>(draw);
    const FvaeModel m = init_model(c);
    const auto e = elbo_terms(m, random_features(c, 6, 100 + draw), 0.7, rng);
    for (std::size_t i = 0; i < 2; ++i) {
      REQUIRE(e.kl_cat[i] >= -1e-9);
      REQUIRE(e.kl_gauss[i] >= -1e-9);
    }
  }
}

TEST_CASE("low-temperature relaxed samples are nearly one-hot") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  const std::size_t rows = 200, C = 5;
  std::vector<double> logits(rows * C), g(rows * C);
  for (double& v : logits) v = nd(rng);
  std::uniform_real_distribution<double> ud(1e-12, 1.0);
  for (double& v : g) v = -std::log(-std::log(ud(rng)));
  const auto y = gumbel_softmax(logits, g, C, 0.01);
  std::size_t sharp = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double mx = *std::max_element(y.begin() + static_cast<std::ptrdiff_t>(r * C),
                                        y.begin() + static_cast<std::ptrdiff_t>((r + 1) * C));
    const double s = std::accumulate(y.begin() + static_cast<std::ptrdiff_t>(r * C),
                                     y.begin() + static_cast<std::ptrdiff_t>((r + 1) * C), 0.0);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    sharp += mx >= 0.99;
  }
  CHECK(sharp >= rows * 97 / 100);
  CHECK_THROWS_AS(gumbel_softmax(logits, g, C, 0.0), InvalidArgument);
}

TEST_CASE("ELBO gradient matches finite differences") {
  FvaeConfig c = small_config();
  c.leaky_slope = 0.2;
  const FvaeModel m = init_model(c);
  const auto batch = random_features(c, 6, 9);
  std::mt19937_64 rng(5);
  const ElboNoise noise = draw_noise(c, batch.rows, rng);
  const auto flat = m.flat_params();
  for (BatchNormMode mode : {BatchNormMode::Train, BatchNormMode::Eval}) {
    diff::GradcheckOptions opt;
    opt.coordinates = 40;
    opt.step = 1e-5;
    const auto r = diff::gradcheck(
        [&](diff::Tape& t, diff::NodeId p) { return record_elbo(t, p, m, batch, 0.9, noise, mode); }, flat,
        {1, flat.size()}, opt);
    CHECK(r.max_rel_error <= 1e-4);
  }
  std::vector<double> grad(m.parameter_count());
  const auto e = elbo_terms(m, batch, 0.9, noise, grad);
  diff::Tape t;
  const auto point = t.leaf({1, flat.size()});
  const auto out = record_elbo(t, point, m, batch, 0.9, noise);
  t.bind(point, flat);
  t.forward();
  CHECK(t.scalar_value(out) == doctest::Approx(e.total).epsilon(1e-12));
  t.backward(out);
  const auto g2 = t.grad(point);
  for (std::size_t k = 0; k < grad.size(); ++k) REQUIRE(g2[k] == doctest::Approx(grad[k]).epsilon(1e-10));
}

TEST_CASE("each decoder reads only its own latent") {
  const FvaeModel m = init_model(small_config());
  std::vector<double> z{0.1, -0.4, 1.2, 0.3};
  const auto a = decode(m, 0, z);
  const auto b = decode(m, 1, z);
  CHECK(a.size() == 2 * 5);
  CHECK(b.size() == 2 * 3);
  // Decoder 1 with a perturbed decoder-0 parameter set is unchanged.
  FvaeModel n = m;
  for (double& v : n.param("dec0.l1.w").value) v += 0.5;
  for (double& v : n.param("dec0.out.b").value) v -= 1.0;
  CHECK(decode(n, 1, z) == b);
  CHECK(decode(n, 0, z) != a);
  // The ELBO gradient of scale 1 recon w.r.t. decoder 0 is zero.
  FvaeConfig c = small_config();
  FvaeModel q = init_model(c);
  const auto batch = random_features(c, 5, 2);
  std::mt19937_64 rng(1);
  const auto noise = draw_noise(c, batch.rows, rng);
  const auto e0 = elbo_terms(q, batch, 1.0, noise);
  for (double& v : q.param("dec0.l2.w").value) v *= 1.5;
  const auto e1 = elbo_terms(q, batch, 1.0, noise);
  CHECK(e1.recon[1] == e0.recon[1]);
  CHECK(e1.recon[0] != e0.recon[0]);
  CHECK_THROWS_AS(decode(m, 2, z), InvalidArgument);
  CHECK_THROWS_AS(decode(m, 0, std::vector<double>{1.0}), SizingError);
}

TEST_CASE("eval-mode assignment is a pure per-row function") {
  FvaeConfig c = small_config();
  c.epochs = 3;
  FvaeModel m = init_model(c);
  const auto f = random_features(c, 40, 3);
  train(m, f);
  const auto a = assign_clusters(m, f);
  const auto b = assign_clusters(m, f);
  CHECK(a.probs == b.probs);
  for (std::size_t i = 0; i < 2; ++i) {
    const std::size_t C = c.clusters[i];
    for (std::size_t r = 0; r < f.rows; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < C; ++k) s += a.probs[i][r * C + k];
      REQUIRE(s == doctest::Approx(1.0).epsilon(1e-12));
      REQUIRE(a.confidence[i][r] == a.probs[i][r * C + static_cast<std::size_t>(a.labels[i][r])]);
    }
  }
  // A row gets the same probabilities whatever it is batched with.
  std::vector<std::size_t> idx{7, 7, 3, 7};
  const auto s = assign_clusters(m, f.subset(idx));
  for (std::size_t i = 0; i < 2; ++i) {
    const std::size_t C = c.clusters[i];
    for (std::size_t k = 0; k < C; ++k) {
      CHECK(s.probs[i][k] == doctest::Approx(a.probs[i][7 * C + k]).epsilon(1e-12));
      CHECK(s.probs[i][C + k] == s.probs[i][k]);
      CHECK(s.probs[i][2 * C + k] == doctest::Approx(a.probs[i][3 * C + k]).epsilon(1e-12));
    }
  }
  std::vector<double> times(3, 1.0);
  CHECK_THROWS_AS(assign_clusters(m, f, times), SizingError);
}

TEST_CASE("zero learning rate leaves the parameters unchanged") {
  FvaeConfig c = small_config();
  c.lr = 0.0;
  c.epochs = 2;
  FvaeModel m = init_model(c);
  const auto before = m.flat_params();
  const auto h = train(m, random_features(c, 30, 8));
  CHECK(m.flat_params() == before);
  CHECK(m.step > 0);
  CHECK(h.val_rows.size() == 3);
  CHECK(h.train_rows.size() == 27);
}

TEST_CASE("training is deterministic") {
  FvaeConfig c = small_config();
  c.epochs = 3;
  const auto f = random_features(c, 50, 12);
  FvaeModel a = init_model(c), b = init_model(c);
  const auto ha = train(a, f), hb = train(b, f);
  CHECK(a.flat_params() == b.flat_params());
  for (std::size_t k = 0; k < ha.epochs.size(); ++k) CHECK(ha.epochs[k].train_total == hb.epochs[k].train_total);
  CHECK(a.buffers[1].value == b.buffers[1].value);
}

TEST_CASE("training lowers the loss on clustered toy data") {
  FvaeConfig c;
  c.d_in = {4};
  c.clusters = {3};
  c.hidden = 16;
  c.latent = 2;
  c.n_joint_blocks = 1;
  c.batch = 64;
  c.epochs = 80;
  c.lr = 3e-3;
  c.seed = 21;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd;
  FeatureMatrix f;
  f.rows = 300;
  f.u.resize(1);
  for (std::size_t r = 0; r < f.rows; ++r)
    for (std::size_t k = 0; k < 4; ++k) f.u[0].push_back(4.0 * static_cast<double>((r % 3 == k)) + 0.3 * nd(rng));
  FvaeModel m = init_model(c);
  const auto h = train(m, f);
  double first = 0.0, last = 0.0;
  for (std::size_t k = 0; k < 10; ++k) {
    first += h.epochs[k].train_total;
    last += h.epochs[h.epochs.size() - 1 - k].train_total;
  }
  CHECK(last < first);
  CHECK(std::isfinite(h.epochs.back().val_total));
}

TEST_CASE("empty data is rejected") {
  const FvaeConfig c = small_config();
  FvaeModel m = init_model(c);
  CHECK_THROWS_AS(train(m, random_features(c, 0, 1)), InvalidArgument);
  FeatureMatrix bad = random_features(c, 4, 1);
  bad.u[1].pop_back();
  CHECK_THROWS_AS(train(m, bad), SizingError);
}

TEST_CASE("cluster sampling") {
  FvaeConfig c = small_config();
  FvaeModel m = init_model(c);
  std::mt19937_64 rng(3);
  CHECK(sample_cluster_representation(m, 0, 1, 0, rng).empty());
  CHECK_THROWS_AS(sample_cluster_representation(m, 0, 3, 1, rng), InvalidArgument);

  for (double& v : m.param("prior0.logvar").value) v = -50.0;
  const auto s = sample_cluster_representation(m, 0, 2, 20, rng);
  REQUIRE(s.size() == 20 * 5);
  for (std::size_t r = 1; r < 20; ++r)
    for (std::size_t k = 0; k < 5; ++k) CHECK(s[r * 5 + k] == doctest::Approx(s[k]).epsilon(0.05).scale(1.0));

  // The sample mean lands nearest the decoded centroid of its own cluster.
  const std::size_t L = c.latent;
  const auto& mu = m.param("prior0.mu").value;
  std::vector<double> mean(5, 0.0);
  for (std::size_t r = 0; r < 20; ++r)
    for (std::size_t k = 0; k < 5; ++k) mean[k] += s[r * 5 + k] / 20.0;
  std::size_t best = 99;
  double best_d = 1e300;
  for (std::size_t y = 0; y < 3; ++y) {
    const auto d = decode(m, 0, std::span(mu).subspan(y * L, L));
    double dist = 0.0;
    for (std::size_t k = 0; k < 5; ++k) dist += (d[k] - mean[k]) * (d[k] - mean[k]);
    if (dist < best_d) best_d = dist, best = y;
  }
  CHECK(best == 2);
}

TEST_CASE("checkpoint round trip") {
  FvaeConfig c = small_config();
  c.epochs = 2;
  FvaeModel m = init_model(c);
  const auto f = random_features(c, 30, 4);
  train(m, f);
  const auto p = temp_path("ckpt.bin");
  save_checkpoint(m, p);
  const FvaeModel r = load_checkpoint(p);
  CHECK(r.flat_params() == m.flat_params());
  CHECK(r.epoch == m.epoch);
  CHECK(r.step == m.step);
  CHECK(r.standardized);
  CHECK(r.feat_std == m.feat_std);
  CHECK(assign_clusters(r, f).probs == assign_clusters(m, f).probs);

  const auto size = std::filesystem::file_size(p);
  std::filesystem::resize_file(p, size - 7);
  CHECK_THROWS_AS(load_checkpoint(p), DigestError);
  std::filesystem::remove(p);
  CHECK_THROWS(load_checkpoint(p));
}
