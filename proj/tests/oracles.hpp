// SPDX-License-Identifier: Apache-2.0
//
// Brute-force reference implementations used only by tests. Each takes a
// different route to the same quantity than the library code.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// Mean absolute difference form: sum_ij |c_i - c_j| / (2 N sum c).
inline double gini(const std::vector<std::uint64_t>& c) {
  const double n = static_cast<double>(c.size());
  double total = 0.0, acc = 0.0;
  for (auto v : c) total += static_cast<double>(v);
  if (total == 0.0) return 0.0;
  for (auto a : c)
    for (auto b : c) acc += std::abs(static_cast<double>(a) - static_cast<double>(b));
  return acc / (2.0 * n * total);
}

// Base-2 entropy over base-2 log N.
inline double entropy(const std::vector<std::uint64_t>& c) {
  if (c.size() == 1) return 0.0;
  double total = 0.0;
  for (auto v : c) total += static_cast<double>(v);
  double h = 0.0;
  for (auto v : c) {
    if (v == 0) continue;
    const double p = static_cast<double>(v) / total;
    h += p * std::log2(1.0 / p);
  }
  return h / std::log2(static_cast<double>(c.size()));
}

// L1 distance between distributions: twice the mass that moved up.
inline double drift(const std::vector<double>& p, const std::vector<double>& q) {
  double up = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) up += std::max(0.0, p[i] - q[i]);
  return 2.0 * up;
}

// Survivors from the two branches written out separately: the threshold set,
// or the k_min indices with fewest better-ranked competitors.
inline std::vector<std::size_t> survivors(const std::vector<double>& s, double tau, std::size_t k_min) {
  std::vector<std::size_t> above;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i] >= tau) above.push_back(i);
  if (above.size() >= k_min) return above;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::size_t better = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s[j] > s[i] || (s[j] == s[i] && j < i)) ++better;
    if (better < k_min) out.push_back(i);
  }
  return out;
}

}  // namespace oracle
