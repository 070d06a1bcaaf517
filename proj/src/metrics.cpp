#include "scatsep/metrics.hpp"

#include <cmath>
#include <map>
#include <utility>

#include "scatsep/errors.hpp"

namespace scatsep {

namespace {

double pairs(double n) { return n * (n - 1.0) / 2.0; }

}  // namespace

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw SizingError("label vectors differ in length");
  if (a.empty()) throw InvalidArgument("adjusted Rand index of an empty labeling");
  std::map<std::pair<int, int>, double> table;
  std::map<int, double> rows, cols;
  for (std::size_t k = 0; k < a.size(); ++k) {
    table[{a[k], b[k]}] += 1.0;
    rows[a[k]] += 1.0;
    cols[b[k]] += 1.0;
  }
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [key, n] : table) index += pairs(n);
  for (const auto& [key, n] : rows) sum_a += pairs(n);
  for (const auto& [key, n] : cols) sum_b += pairs(n);
  const double expected = sum_a * sum_b / pairs(static_cast<double>(a.size()));
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

double relative_l2_error(std::span<const double> estimate, std::span<const double> truth) {
  if (estimate.size() != truth.size()) throw SizingError("signals differ in length");
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    num += (estimate[k] - truth[k]) * (estimate[k] - truth[k]);
    den += truth[k] * truth[k];
  }
  if (den == 0.0) throw InvalidArgument("reference signal is zero");
  return std::sqrt(num / den);
}

}  // namespace scatsep
