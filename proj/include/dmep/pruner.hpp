// SPDX-License-Identifier: Apache-2.0
//
// One-shot module-wise expert pruning: survivor selection from utilization
// scores, then physical removal of the pruned rows from expert stacks, gate
// and optimizer moments.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmep/backbone.hpp"
#include "dmep/moe_adapter.hpp"
#include "dmep/optimizer.hpp"
#include "dmep/routing_ledger.hpp"

namespace dmep {

// {i : s_i >= tau} when that has at least k_min members, otherwise the k_min
// best scores (ties to the lower index). Always ascending.
inline std::vector<std::size_t> survivor_set(std::span<const double> scores, double tau, std::size_t k_min) {
  const std::size_t n = scores.size();
  if (k_min == 0 || k_min > n) {
    throw std::invalid_argument("survivor_set: k_min=" + std::to_string(k_min) + " outside [1, " + std::to_string(n) +
                                "]");
  }
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("survivor_set: tau must lie in (0, 1)");
  const double total = std::accumulate(scores.begin(), scores.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("survivor_set: scores sum to " + std::to_string(total) + ", expected 1");
  }
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < n; ++i)
    if (scores[i] >= tau) kept.push_back(i);
  if (kept.size() >= k_min) return kept;
  return topk_indices(scores, k_min);
}

struct BankShape {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t rank = 0;
  std::size_t n_experts = 0;

  std::size_t params(std::size_t experts) const { return bank_param_count(d_in, d_out, rank, experts); }
};

inline BankShape shape_of(const ExpertBank& b) { return BankShape{b.d_in, b.d_out, b.rank, b.n_experts()}; }

struct ModulePlan {
  ModuleId module;
  std::vector<double> scores;         // empty for a never-routed module
  std::vector<std::size_t> survivors;
  bool threshold_branch = true;
  bool never_routed = false;
  std::size_t n_before = 0;
  std::optional<std::size_t> params_before;
  std::optional<std::size_t> params_after;
};

struct PruningPlan {
  std::size_t step = 0;
  double tau = 0.10;
  std::size_t k_min = 2;
  std::vector<ModulePlan> modules;
  std::optional<std::size_t> params_before;
  std::optional<std::size_t> params_after;
  std::vector<std::string> warnings;

  const ModulePlan& module(ModuleId m) const {
    for (const auto& mp : modules)
      if (mp.module == m) return mp;
    throw std::out_of_range("PruningPlan: no entry for " + m.name());
  }

  bool prunes_anything() const {
    return std::any_of(modules.begin(), modules.end(),
                       [](const ModulePlan& mp) { return mp.survivors.size() < mp.n_before; });
  }
};

// Survivors per module from raw counts. Shapes, when known for a module,
// fill in its parameter accounting.
inline PruningPlan plan_from_counts(const std::map<ModuleId, std::vector<std::uint64_t>>& counts,
                                    const std::map<ModuleId, BankShape>& shapes, double tau, std::size_t k_min,
                                    std::size_t step) {
  PruningPlan plan;
  plan.step = step;
  plan.tau = tau;
  plan.k_min = k_min;
  std::size_t before = 0, after = 0;
  bool all_shapes = !counts.empty();
  for (const auto& [m, c] : counts) {
    ModulePlan mp;
    mp.module = m;
    mp.n_before = c.size();
    const std::span<const std::uint64_t> cs(c);
    if (total_of(cs) == 0.0) {
      if (k_min > c.size()) throw std::invalid_argument(m.name() + ": k_min exceeds expert count");
      mp.never_routed = true;
      mp.threshold_branch = false;
      mp.survivors.resize(k_min);
      std::iota(mp.survivors.begin(), mp.survivors.end(), std::size_t{0});
      plan.warnings.push_back(m.name() + ": never routed, keeping the first " + std::to_string(k_min) + " experts");
    } else {
      mp.scores = normalized(cs);
      mp.survivors = survivor_set(mp.scores, tau, k_min);
      const auto above = std::count_if(mp.scores.begin(), mp.scores.end(), [&](double s) { return s >= tau; });
      mp.threshold_branch = static_cast<std::size_t>(above) >= k_min;
    }
    auto sh = shapes.find(m);
    if (sh != shapes.end()) {
      if (sh->second.n_experts != c.size()) {
        throw std::invalid_argument(m.name() + ": ledger has " + std::to_string(c.size()) + " experts, bank has " +
                                    std::to_string(sh->second.n_experts));
      }
      mp.params_before = sh->second.params(c.size());
      mp.params_after = sh->second.params(mp.survivors.size());
      before += *mp.params_before;
      after += *mp.params_after;
    } else {
      all_shapes = false;
    }
    plan.modules.push_back(std::move(mp));
  }
  if (all_shapes) {
    plan.params_before = before;
    plan.params_after = after;
  }
  return plan;
}

inline PruningPlan build_pruning_plan(const RoutingLedger& ledger, const AdapterSet& banks, double tau,
                                      std::size_t k_min, std::size_t step) {
  std::map<ModuleId, std::vector<std::uint64_t>> counts;
  std::map<ModuleId, BankShape> shapes;
  for (const auto& [m, bank] : banks) {
    counts[m] = ledger.counts(m);
    shapes[m] = shape_of(bank);
  }
  return plan_from_counts(counts, shapes, tau, k_min, step);
}

namespace detail {
inline void check_survivors(std::span<const std::size_t> survivors, std::size_t n, const std::string& what) {
  if (survivors.empty()) throw std::invalid_argument(what + ": empty survivor set");
  for (std::size_t i = 0; i < survivors.size(); ++i) {
    if (survivors[i] >= n) throw std::out_of_range(what + ": survivor " + std::to_string(survivors[i]) + " >= N");
    if (i > 0 && survivors[i] <= survivors[i - 1]) throw std::invalid_argument(what + ": survivors not ascending");
  }
}
}  // namespace detail

inline Matrix select_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = m.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline ExpertBank slice_bank(const ExpertBank& bank, std::span<const std::size_t> survivors) {
  detail::check_survivors(survivors, bank.n_experts(), bank.module.name());
  ExpertBank out = bank;
  out.a_stack = select_rows(bank.a_stack, survivors);
  out.b_stack = select_rows(bank.b_stack, survivors);
  out.gate = select_rows(bank.gate, survivors);
  return out;
}

inline void slice_optimizer_state(OptimizerState& state, BlockId block, std::span<const std::size_t> survivors,
                                  const Matrix* expected_param = nullptr) {
  auto it = state.blocks.find(block);
  if (it == state.blocks.end()) throw std::out_of_range("slice_optimizer_state: unknown block " + block.name());
  Moments& mom = it->second;
  if (expected_param != nullptr && !mom.m.same_shape(*expected_param)) {
    throw ShapeError("slice_optimizer_state: state " + mom.m.shape_string() + " vs parameter " +
                     expected_param->shape_string() + " for " + block.name());
  }
  detail::check_survivors(survivors, mom.m.rows(), block.name());
  mom = Moments{select_rows(mom.m, survivors), select_rows(mom.v, survivors)};
}

struct PruneReport {
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  std::map<ModuleId, std::size_t> retained;
};

// Slices every bank, its optimizer blocks and its ledger track. Validation
// happens up front; on any mismatch nothing is modified.
inline PruneReport apply_plan(AdapterSet& adapters, OptimizerState& optimizer, RoutingLedger* ledger,
                              const PruningPlan& plan) {
  if (plan.modules.size() != adapters.size()) {
    throw std::invalid_argument("apply_plan: plan covers " + std::to_string(plan.modules.size()) + " modules, model has " +
                                std::to_string(adapters.size()));
  }
  AdapterSet new_adapters = adapters;
  OptimizerState new_state = optimizer;
  PruneReport report;
  for (const ModulePlan& mp : plan.modules) {
    auto it = adapters.find(mp.module);
    if (it == adapters.end()) throw std::invalid_argument("apply_plan: unknown module " + mp.module.name());
    const ExpertBank& bank = it->second;
    if (bank.n_experts() != mp.n_before) {
      throw std::invalid_argument("apply_plan: " + mp.module.name() + " has " + std::to_string(bank.n_experts()) +
                                  " experts but the plan was built for " + std::to_string(mp.n_before));
    }
    report.params_before += trainable_param_count(bank);
    ExpertBank sliced = slice_bank(bank, mp.survivors);
    for (StackPart p : kStackParts) {
      slice_optimizer_state(new_state, BlockId{mp.module, p}, mp.survivors, &block_of(bank, p));
    }
    report.params_after += trainable_param_count(sliced);
    report.retained[mp.module] = sliced.n_experts();
    new_adapters[mp.module] = std::move(sliced);
  }
  if (ledger != nullptr) {
    for (const ModulePlan& mp : plan.modules) {
      if (!ledger->contains(mp.module)) throw std::invalid_argument("apply_plan: ledger lacks " + mp.module.name());
    }
    for (const ModulePlan& mp : plan.modules) ledger->redimension(mp.module, mp.survivors.size());
  }
  adapters = std::move(new_adapters);
  optimizer = std::move(new_state);
  return report;
}

inline std::map<ModuleId, std::vector<bool>> keep_masks(const PruningPlan& plan) {
  std::map<ModuleId, std::vector<bool>> masks;
  for (const auto& mp : plan.modules) {
    std::vector<bool> keep(mp.n_before, false);
    for (std::size_t i : mp.survivors) keep[i] = true;
    masks.emplace(mp.module, std::move(keep));
  }
  return masks;
}

}  // namespace dmep
