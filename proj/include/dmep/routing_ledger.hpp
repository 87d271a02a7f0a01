// SPDX-License-Identifier: Apache-2.0
//
// Cumulative hard-routing counts per module and the load metrics derived
// from them (Gini coefficient, normalized entropy, L1 drift).

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmep/module_id.hpp"

namespace dmep {

class EmptyModuleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
concept Arithmetic = std::integral<T> || std::floating_point<T>;

template <Arithmetic T>
double total_of(std::span<const T> counts) {
  double s = 0.0;
  for (T c : counts) s += static_cast<double>(c);
  return s;
}

template <Arithmetic T>
std::vector<double> normalized(std::span<const T> counts) {
  const double total = total_of(counts);
  if (!(total > 0.0)) throw EmptyModuleError("normalized: all counts are zero");
  std::vector<double> s(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) s[i] = static_cast<double>(counts[i]) / total;
  return s;
}

// G = sum_i (2i - N - 1) c_(i) / (N * sum c), c ascending, i from 1. Zero for
// an all-zero vector.
template <Arithmetic T>
double gini(std::span<const T> counts) {
  const std::size_t n = counts.size();
  if (n == 0) throw std::invalid_argument("gini: empty vector");
  const double total = total_of(counts);
  if (!(total > 0.0)) return 0.0;
  std::vector<double> sorted(counts.begin(), counts.end());
  std::sort(sorted.begin(), sorted.end());
  double acc = 0.0;
  const double nn = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) acc += (2.0 * static_cast<double>(i + 1) - nn - 1.0) * sorted[i];
  return acc / (nn * total);
}

// Shannon entropy of the count distribution divided by log N. A single
// expert has entropy 0.
template <Arithmetic T>
double entropy(std::span<const T> counts) {
  const std::size_t n = counts.size();
  if (n == 0) throw std::invalid_argument("entropy: empty vector");
  const double total = total_of(counts);
  if (!(total > 0.0)) throw EmptyModuleError("entropy: all counts are zero");
  if (n == 1) return 0.0;
  double h = 0.0;
  for (T c : counts) {
    if (c == T{0}) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h / std::log(static_cast<double>(n));
}

inline double drift(std::span<const double> now, std::span<const double> prev) {
  if (now.size() != prev.size()) {
    throw std::invalid_argument("drift: length " + std::to_string(now.size()) + " vs " + std::to_string(prev.size()));
  }
  double d = 0.0;
  for (std::size_t i = 0; i < now.size(); ++i) d += std::abs(now[i] - prev[i]);
  return d;
}

struct Snapshot {
  std::size_t step = 0;
  std::vector<double> distribution;  // empty when the module had no counts
};

struct ModuleMetrics {
  ModuleId module;
  std::size_t step = 0;
  bool empty = false;
  double gini = 0.0;
  std::optional<double> entropy;
  std::optional<double> drift;
};

class RoutingLedger {
 public:
  explicit RoutingLedger(std::size_t delta_t = 10) : delta_t_(delta_t) {
    if (delta_t_ == 0) throw std::invalid_argument("RoutingLedger: delta_t must be positive");
  }

  std::size_t delta_t() const noexcept { return delta_t_; }

  void add_module(ModuleId m, std::size_t n_experts) {
    if (n_experts == 0) throw std::invalid_argument("RoutingLedger: module with zero experts");
    modules_[m] = Track{std::vector<std::uint64_t>(n_experts, 0), {}, {}};
  }

  bool contains(ModuleId m) const { return modules_.count(m) != 0; }

  std::vector<ModuleId> modules() const {
    std::vector<ModuleId> out;
    out.reserve(modules_.size());
    for (const auto& [m, _] : modules_) out.push_back(m);
    return out;
  }

  // One increment per (token, selected expert).
  void record(ModuleId m, std::span<const std::vector<std::size_t>> selected) {
    Track& tr = track(m);
    for (const auto& sel : selected) {
      for (std::size_t i : sel) {
        if (i >= tr.counts.size()) {
          throw std::out_of_range(m.name() + ": expert index " + std::to_string(i) + " >= N=" +
                                  std::to_string(tr.counts.size()));
        }
      }
    }
    for (const auto& sel : selected)
      for (std::size_t i : sel) ++tr.counts[i];
  }

  const std::vector<std::uint64_t>& counts(ModuleId m) const { return track(m).counts; }

  void set_counts(ModuleId m, std::vector<std::uint64_t> counts) {
    if (counts.empty()) throw std::invalid_argument("set_counts: empty vector");
    track(m).counts = std::move(counts);
  }

  std::uint64_t total_count() const {
    std::uint64_t s = 0;
    for (const auto& [_, tr] : modules_)
      for (auto c : tr.counts) s += c;
    return s;
  }

  std::vector<double> utilization_scores(ModuleId m) const {
    const auto& c = counts(m);
    if (total_of(std::span<const std::uint64_t>(c)) == 0.0) {
      throw EmptyModuleError(m.name() + ": module was never routed to");
    }
    return normalized(std::span<const std::uint64_t>(c));
  }

  // New expert count for a module: counts restart at zero and prior
  // snapshots are dropped because their dimension no longer matches.
  void redimension(ModuleId m, std::size_t n_experts) {
    if (n_experts == 0) throw std::invalid_argument("redimension: zero experts");
    Track& tr = track(m);
    tr.counts.assign(n_experts, 0);
    tr.snapshots.clear();
  }

  void reset_counts() {
    for (auto& [_, tr] : modules_) std::fill(tr.counts.begin(), tr.counts.end(), 0);
  }

  const std::vector<Snapshot>& snapshots(ModuleId m) const { return track(m).snapshots; }
  const std::vector<ModuleMetrics>& history(ModuleId m) const { return track(m).history; }

  // Current metrics without taking a snapshot; drift is left unset.
  ModuleMetrics current_metrics(ModuleId m, std::size_t step) const {
    const Track& tr = track(m);
    ModuleMetrics row;
    row.module = m;
    row.step = step;
    const std::span<const std::uint64_t> c(tr.counts);
    row.empty = total_of(c) == 0.0;
    row.gini = gini(c);
    if (!row.empty) row.entropy = entropy(c);
    return row;
  }

  // Appends one snapshot per module and returns the metric rows. Drift is
  // present when the module has a previous non-empty snapshot.
  std::vector<ModuleMetrics> snapshot_and_report(std::size_t step) {
    std::vector<ModuleMetrics> rows;
    rows.reserve(modules_.size());
    for (auto& [m, tr] : modules_) {
      ModuleMetrics row = current_metrics(m, step);
      Snapshot snap;
      snap.step = step;
      if (!row.empty) snap.distribution = normalized(std::span<const std::uint64_t>(tr.counts));
      if (!tr.snapshots.empty() && !row.empty && !tr.snapshots.back().distribution.empty()) {
        row.drift = dmep::drift(snap.distribution, tr.snapshots.back().distribution);
      }
      tr.snapshots.push_back(std::move(snap));
      tr.history.push_back(row);
      rows.push_back(row);
    }
    return rows;
  }

  void restore_snapshots(ModuleId m, std::vector<Snapshot> snaps, std::vector<ModuleMetrics> history) {
    Track& tr = track(m);
    tr.snapshots = std::move(snaps);
    tr.history = std::move(history);
  }

 private:
  struct Track {
    std::vector<std::uint64_t> counts;
    std::vector<Snapshot> snapshots;
    std::vector<ModuleMetrics> history;
  };

  Track& track(ModuleId m) {
    auto it = modules_.find(m);
    if (it == modules_.end()) throw std::out_of_range("RoutingLedger: unknown module " + m.name());
    return it->second;
  }
  const Track& track(ModuleId m) const {
    auto it = modules_.find(m);
    if (it == modules_.end()) throw std::out_of_range("RoutingLedger: unknown module " + m.name());
    return it->second;
  }

  std::size_t delta_t_;
  std::map<ModuleId, Track> modules_;
};

struct MetricSummary {
  std::optional<double> mean_gini;
  std::optional<double> mean_entropy;
  std::optional<double> mean_drift;
};

// Averages over non-empty modules; drift over modules that reported one.
inline MetricSummary summarize(std::span<const ModuleMetrics> rows) {
  MetricSummary s;
  double g = 0.0, h = 0.0, d = 0.0;
  std::size_t ng = 0, nd = 0;
  for (const auto& r : rows) {
    if (r.empty) continue;
    g += r.gini;
    h += r.entropy.value_or(0.0);
    ++ng;
    if (r.drift) {
      d += *r.drift;
      ++nd;
    }
  }
  if (ng > 0) {
    s.mean_gini = g / static_cast<double>(ng);
    s.mean_entropy = h / static_cast<double>(ng);
  }
  if (nd > 0) s.mean_drift = d / static_cast<double>(nd);
  return s;
}

}  // namespace dmep
