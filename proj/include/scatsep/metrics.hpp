#pragma once

#include <cstddef>
#include <span>

namespace scatsep {

/// Adjusted Rand index between two labelings of the same items. Labels are
/// arbitrary non-negative integers. Returns 1 when both partitions are
/// trivial and identical.
double adjusted_rand_index(std::span<const int> a, std::span<const int> b);

/// ||estimate - truth|| / ||truth||.
double relative_l2_error(std::span<const double> estimate, std::span<const double> truth);

}  // namespace scatsep
