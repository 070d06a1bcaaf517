#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "scatsep/errors.hpp"
#include "scatsep/metrics.hpp"

using namespace scatsep;

namespace {

// Hubert-Arabie ARI from explicit pair enumeration.
double ari_by_pairs(const std::vector<int>& a, const std::vector<int>& b) {
  double both = 0.0, only_a = 0.0, only_b = 0.0, n_pairs = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      both += sa && sb;
      only_a += sa && !sb;
      only_b += !sa && sb;
      n_pairs += 1.0;
    }
  const double pa = both + only_a, pb = both + only_b;
  const double expected = pa * pb / n_pairs;
  return (both - expected) / (0.5 * (pa + pb) - expected);
}

}  // namespace

TEST_CASE("adjusted Rand index reference values") {
  CHECK(adjusted_rand_index(std::vector<int>{0, 0, 1, 1}, std::vector<int>{0, 0, 1, 2}) ==
        doctest::Approx(4.0 / 7.0).epsilon(1e-12));
  CHECK(adjusted_rand_index(std::vector<int>{0, 0, 0, 1, 1, 1}, std::vector<int>{0, 0, 1, 1, 2, 2}) ==
        doctest::Approx(8.0 / 33.0).epsilon(1e-12));
  CHECK(adjusted_rand_index(std::vector<int>{0, 0, 1, 1}, std::vector<int>{5, 5, 3, 3}) == 1.0);
  CHECK(adjusted_rand_index(std::vector<int>{0, 0, 0}, std::vector<int>{1, 1, 1}) == 1.0);
}

TEST_CASE("adjusted Rand index matches pair counting") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> ka(0, 3), kb(0, 4);
    std::vector<int> a(40), b(40);
    for (auto& v : a) v = ka(rng);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = trial % 2 ? kb(rng) : (a[i] + (kb(rng) == 0)) % 4;
    REQUIRE(adjusted_rand_index(a, b) == doctest::Approx(ari_by_pairs(a, b)).epsilon(1e-12));
    REQUIRE(adjusted_rand_index(a, b) == doctest::Approx(adjusted_rand_index(b, a)).epsilon(1e-14));
  }
}

TEST_CASE("adjusted Rand index errors") {
  CHECK_THROWS_AS(adjusted_rand_index(std::vector<int>{0}, std::vector<int>{0, 1}), SizingError);
  CHECK_THROWS_AS(adjusted_rand_index(std::vector<int>{}, std::vector<int>{}), InvalidArgument);
}

TEST_CASE("relative L2 error") {
  const std::vector<double> t{3.0, 4.0}, e{3.0, 0.0};
  CHECK(relative_l2_error(e, t) == doctest::Approx(0.8));
  CHECK(relative_l2_error(t, t) == 0.0);
  CHECK_THROWS_AS(relative_l2_error(t, std::vector<double>{0.0, 0.0}), InvalidArgument);
}
