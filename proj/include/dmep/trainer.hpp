// SPDX-License-Identifier: Apache-2.0
//
// The three-phase training loop: dense exploration with the load-balancing
// term and hard-routing statistics, a single structural prune, then
// continued training of the survivors with the balancing term switched off.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dmep/autodiff.hpp"
#include "dmep/backbone.hpp"
#include "dmep/moe_adapter.hpp"
#include "dmep/optimizer.hpp"
#include "dmep/pruner.hpp"
#include "dmep/routing_ledger.hpp"
#include "dmep/synthetic_tasks.hpp"

namespace dmep {

struct PhaseConfig {
  std::size_t epochs = 3;
  std::size_t warmup_epochs = 1;
  std::optional<std::size_t> prune_at_step;  // overrides the end-of-warm-up boundary
  bool prune_enabled = true;
  double tau = 0.10;
  std::size_t k_min = 2;
  double lambda = 0.01;
  std::size_t k = 2;
  std::optional<double> drift_gate;  // mean drift that must be reached before pruning
  std::size_t drift_gate_grace = 50;  // extra steps to wait for the gate
  std::size_t delta_t = 10;

  void validate() const {
    if (epochs == 0) throw std::invalid_argument("phase.epochs must be positive");
    if (k == 0) throw std::invalid_argument("phase.k must be positive");
    if (k_min < k) {
      throw std::invalid_argument("phase.k_min (" + std::to_string(k_min) + ") must be >= phase.k (" +
                                  std::to_string(k) + ")");
    }
    if (prune_enabled && !prune_at_step && warmup_epochs >= epochs) {
      throw std::invalid_argument("phase.warmup_epochs must be < phase.epochs");
    }
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("phase.tau must lie in (0, 1)");
    if (lambda < 0.0) throw std::invalid_argument("phase.lambda must be >= 0");
    if (delta_t == 0) throw std::invalid_argument("phase.delta_t must be positive");
  }
};

struct OptimConfig {
  double lr = 3e-3;
  double warmup_frac = 0.1;
  std::size_t batch_size = 32;
  AdamWConfig adamw;
};

struct TrainConfig {
  BackboneConfig backbone;
  AdapterConfig adapter;
  PhaseConfig phase;
  OptimConfig optim;
  TaskSpec task;
  std::uint64_t backbone_seed = 42;
  std::uint64_t adapter_seed = 42;
  std::uint64_t data_seed = 42;
  std::size_t throughput_warmup_skip = 2;
  bool wall_time_in_metrics = false;

  void validate() const {
    backbone.validate();
    phase.validate();
    task.validate();
    if (task.vocab_size != backbone.vocab_size) {
      throw std::invalid_argument("task.vocab_size must equal backbone.vocab_size");
    }
    if (phase.k > adapter.n_experts) throw std::invalid_argument("phase.k exceeds adapter.n_experts");
    if (phase.prune_enabled && phase.k_min > adapter.n_experts) {
      throw std::invalid_argument("phase.k_min exceeds adapter.n_experts");
    }
    if (optim.batch_size == 0) throw std::invalid_argument("optim.batch_size must be positive");
    if (optim.lr < 0.0) throw std::invalid_argument("optim.lr must be >= 0");
    if (optim.warmup_frac < 0.0 || optim.warmup_frac > 1.0) {
      throw std::invalid_argument("optim.warmup_frac must lie in [0, 1]");
    }
  }

  std::size_t steps_per_epoch() const { return (task.n_train + optim.batch_size - 1) / optim.batch_size; }
  std::size_t total_steps() const { return phase.epochs * steps_per_epoch(); }

  // Completed-step count after which the prune is scheduled, if pruning is on.
  std::optional<std::size_t> scheduled_prune_step() const {
    if (!phase.prune_enabled) return std::nullopt;
    return phase.prune_at_step.value_or(phase.warmup_epochs * steps_per_epoch());
  }
};

struct Model {
  Backbone backbone;
  AdapterSet adapters;

  std::uint64_t adapter_checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [_, bank] : adapters) h = h * 1099511628211ULL ^ bank.checksum();
    return h;
  }
};

inline Model init_model(const TrainConfig& cfg) {
  Model m;
  m.backbone = init_backbone(cfg.backbone, cfg.backbone_seed);
  m.adapters = init_adapters(m.backbone, cfg.adapter, cfg.adapter_seed);
  return m;
}

// Balancing coefficient for a step: the configured value before the prune
// event, zero from the prune event on.
inline double phase_lambda(std::size_t step, const PhaseConfig& cfg, std::optional<std::size_t> prune_step) {
  if (prune_step && step >= *prune_step) return 0.0;
  return cfg.lambda;
}

struct LossBreakdown {
  double task = 0.0;
  double aux = 0.0;  // mean over modules of the per-module balancing loss
  double total = 0.0;
  std::map<BlockId, Matrix> grads;
  std::uint64_t selection_fingerprint = 0;
  std::map<ModuleId, RoutingDecision> routing;
};

inline std::uint64_t fingerprint_selection(const std::map<ModuleId, ModuleRouting>& routing) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [m, r] : routing) {
    for (const auto& sel : r.decision.selected) {
      for (std::size_t i : sel) {
        h ^= static_cast<std::uint64_t>(i) + 0x9E37u;
        h *= 1099511628211ULL;
      }
      h ^= 0xFFu;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

// L_task (cross entropy at each sequence's last position) plus lambda times
// the module-mean balancing loss; gradients for every adapter block when
// requested.
inline LossBreakdown compute_loss(const Model& model, const TokenBatch& tokens, const std::vector<std::size_t>& labels,
                                  std::size_t k, double lambda, RoutingLedger* ledger, bool want_grads) {
  ad::Tape tape;
  ForwardOptions opt;
  opt.k = k;
  opt.ledger = ledger;
  opt.trainable_adapters = want_grads;
  TapeForward fwd = forward_on_tape(tape, model.backbone, &model.adapters, tokens, opt);
  ad::Var last = ad::gather_rows(fwd.logits, tokens.last_positions());
  ad::Var task = ad::cross_entropy_with_logits(last, labels);

  LossBreakdown out;
  out.task = task.value().item();
  ad::Var total = task;
  if (lambda > 0.0 && !fwd.routing.empty()) {
    std::optional<ad::Var> aux_sum;
    for (const auto& [m, r] : fwd.routing) {
      ad::Var term = ad::load_balance_loss(r.probs, assignment_fractions(r.decision));
      aux_sum = aux_sum ? ad::add(*aux_sum, term) : term;
    }
    ad::Var aux_mean = ad::scale(*aux_sum, 1.0 / static_cast<double>(fwd.routing.size()));
    out.aux = aux_mean.value().item();
    total = ad::add(task, ad::scale(aux_mean, lambda));
  }
  out.total = total.value().item();
  out.selection_fingerprint = fingerprint_selection(fwd.routing);
  for (auto& [m, r] : fwd.routing) out.routing.emplace(m, r.decision);

  if (want_grads) {
    ad::GradientMap g = tape.backward(total);
    for (const auto& [m, vars] : fwd.params) {
      out.grads.emplace(BlockId{m, StackPart::A}, std::move(g.at(vars.a_stack.id())));
      out.grads.emplace(BlockId{m, StackPart::B}, std::move(g.at(vars.b_stack.id())));
      out.grads.emplace(BlockId{m, StackPart::Gate}, std::move(g.at(vars.gate.id())));
    }
  }
  return out;
}

inline void apply_gradients(Model& model, OptimizerState& state, const std::map<BlockId, Matrix>& grads, double lr) {
  std::vector<ParamGrad> items;
  items.reserve(grads.size());
  for (const auto& [id, g] : grads) {
    items.push_back(ParamGrad{id, &block_of(model.adapters.at(id.module), id.part), &g});
  }
  adamw_step(items, state, lr);
}

struct MetricsRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::string phase;
  double lambda = 0.0;
  double task_loss = 0.0;
  double aux_loss = 0.0;
  double total_loss = 0.0;
  std::size_t tokens = 0;
  double step_wall_seconds = 0.0;
  std::optional<double> mean_gini;
  std::optional<double> mean_entropy;
  std::optional<double> mean_drift;
  std::size_t trainable_params = 0;
};

inline constexpr const char* kPhaseExplore = "explore";
inline constexpr const char* kPhaseSpecialize = "specialize";

struct StepTiming {
  std::size_t step = 0;
  std::string phase;
  std::size_t tokens = 0;
  double wall_seconds = 0.0;
};

struct PhaseThroughput {
  std::optional<double> tokens_per_second;
  std::optional<double> median_step_seconds;
  std::size_t steps_used = 0;
};

struct ThroughputSummary {
  PhaseThroughput pre;
  PhaseThroughput post;

  std::optional<double> ratio() const {
    if (!pre.tokens_per_second || !post.tokens_per_second) return std::nullopt;
    return *post.tokens_per_second / *pre.tokens_per_second;
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Median per-step tokens/s and step time for the pre- and post-prune
// windows, each skipping its first `warmup_skip` steps. An empty window is
// reported as absent; a non-empty window with nothing left after the skip is
// rejected.
inline ThroughputSummary measure_throughput(const std::vector<StepTiming>& log, std::size_t warmup_skip) {
  auto window = [&](const std::string& phase) {
    std::vector<const StepTiming*> rows;
    for (const auto& s : log)
      if (s.phase == phase) rows.push_back(&s);
    PhaseThroughput pt;
    if (rows.empty()) return pt;
    if (rows.size() <= warmup_skip) {
      throw std::invalid_argument("measure_throughput: " + phase + " window has " + std::to_string(rows.size()) +
                                  " steps, not more than warmup_skip=" + std::to_string(warmup_skip));
    }
    std::vector<double> rates, secs;
    for (std::size_t i = warmup_skip; i < rows.size(); ++i) {
      secs.push_back(rows[i]->wall_seconds);
      rates.push_back(static_cast<double>(rows[i]->tokens) / rows[i]->wall_seconds);
    }
    pt.tokens_per_second = median(rates);
    pt.median_step_seconds = median(secs);
    pt.steps_used = rates.size();
    return pt;
  };
  ThroughputSummary s;
  s.pre = window(kPhaseExplore);
  s.post = window(kPhaseSpecialize);
  return s;
}

struct ParamReport {
  std::size_t total = 0;
  std::map<ModuleId, std::size_t> per_module;
  std::map<ModuleId, std::size_t> experts;
  double mean_experts = 0.0;
};

inline ParamReport param_report(const AdapterSet& adapters) {
  ParamReport r;
  std::size_t experts = 0;
  for (const auto& [m, bank] : adapters) {
    const std::size_t n = trainable_param_count(bank);
    r.per_module[m] = n;
    r.experts[m] = bank.n_experts();
    r.total += n;
    experts += bank.n_experts();
  }
  if (!adapters.empty()) r.mean_experts = static_cast<double>(experts) / static_cast<double>(adapters.size());
  return r;
}

// Fraction of examples whose argmax logit at the last position is the label.
inline double evaluate(const Model& model, const std::vector<Example>& split, std::size_t k,
                       std::size_t batch_size = 64) {
  if (split.empty()) throw std::invalid_argument("evaluate: empty split");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t end = std::min(split.size(), start + batch_size);
    std::vector<std::vector<std::size_t>> seqs;
    for (std::size_t i = start; i < end; ++i) seqs.push_back(split[i].tokens);
    const TokenBatch tb = TokenBatch::from_sequences(seqs);
    const Matrix logits = forward(model.backbone, model.adapters, tb, k);
    const auto last = tb.last_positions();
    for (std::size_t b = 0; b < tb.batch; ++b) {
      auto row = logits.row(last[b]);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == split[start + b].label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

struct RunArtifacts {
  TrainConfig config;
  std::vector<MetricsRow> metrics;
  std::vector<StepTiming> timing;
  RoutingLedger exploration_ledger;  // state the prune decision saw (or end of run)
  RoutingLedger final_ledger;
  std::optional<PruningPlan> plan;
  std::optional<PruneReport> prune_report;
  std::optional<std::size_t> prune_step;
  Model model;
  OptimizerState optimizer;
  ThroughputSummary throughput;
  ParamReport params_initial;
  ParamReport params_final;
  double eval_accuracy = 0.0;
  std::vector<std::string> warnings;
};

inline TokenBatch make_batch(const std::vector<Example>& split, const std::vector<std::size_t>& idx,
                             std::vector<std::size_t>& labels) {
  std::vector<std::vector<std::size_t>> seqs;
  seqs.reserve(idx.size());
  labels.clear();
  for (std::size_t i : idx) {
    seqs.push_back(split[i].tokens);
    labels.push_back(split[i].label);
  }
  return TokenBatch::from_sequences(seqs);
}

inline RunArtifacts train(const TrainConfig& input_cfg) {
  TrainConfig cfg = input_cfg;
  cfg.task.seed = cfg.data_seed;
  cfg.task.vocab_size = cfg.backbone.vocab_size;
  cfg.validate();

  const TaskSplits data = gen_cluster_task(cfg.task);
  const std::size_t total_steps = cfg.total_steps();
  const std::optional<std::size_t> scheduled = cfg.scheduled_prune_step();
  if (scheduled && (*scheduled == 0 || *scheduled > total_steps)) {
    throw std::invalid_argument("prune step " + std::to_string(*scheduled) + " outside the run of " +
                                std::to_string(total_steps) + " steps");
  }

  RunArtifacts art;
  art.config = cfg;
  art.model = init_model(cfg);
  Model& model = art.model;
  art.optimizer = init_optimizer(model.adapters, cfg.optim.adamw);
  RoutingLedger ledger(cfg.phase.delta_t);
  for (const auto& [m, bank] : model.adapters) ledger.add_module(m, bank.n_experts());
  art.params_initial = param_report(model.adapters);

  std::optional<std::size_t> pruned_at;
  std::optional<MetricSummary> last_snapshot;
  std::vector<std::size_t> labels;
  std::size_t step = 0;

  auto do_prune = [&](std::size_t completed) {
    art.exploration_ledger = ledger;
    PruningPlan plan = build_pruning_plan(ledger, model.adapters, cfg.phase.tau, cfg.phase.k_min, completed);
    for (const auto& w : plan.warnings) art.warnings.push_back(w);
    art.prune_report = apply_plan(model.adapters, art.optimizer, &ledger, plan);
    art.plan = std::move(plan);
    pruned_at = completed;
    last_snapshot.reset();
  };

  for (std::size_t epoch = 0; epoch < cfg.phase.epochs; ++epoch) {
    for (const auto& idx : batch_iter(data.train.size(), cfg.optim.batch_size, cfg.data_seed, epoch)) {
      const auto t0 = std::chrono::steady_clock::now();
      const TokenBatch tb = make_batch(data.train, idx, labels);
      const double lambda = phase_lambda(step, cfg.phase, pruned_at);
      const double lr = schedule_lr(step, total_steps, cfg.optim.lr, cfg.optim.warmup_frac);
      LossBreakdown loss = compute_loss(model, tb, labels, cfg.phase.k, lambda, &ledger, true);
      apply_gradients(model, art.optimizer, loss.grads, lr);
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

      const std::size_t completed = step + 1;
      if (completed % cfg.phase.delta_t == 0) {
        const auto rows = ledger.snapshot_and_report(completed);
        last_snapshot = summarize(rows);
      }
      std::vector<ModuleMetrics> current;
      for (const ModuleId& m : ledger.modules()) current.push_back(ledger.current_metrics(m, completed));
      const MetricSummary now = summarize(current);

      MetricsRow row;
      row.step = step;
      row.epoch = epoch;
      row.phase = pruned_at ? kPhaseSpecialize : kPhaseExplore;
      row.lambda = lambda;
      row.task_loss = loss.task;
      row.aux_loss = lambda > 0.0 ? loss.aux : 0.0;
      row.total_loss = loss.total;
      row.tokens = tb.tokens();
      row.step_wall_seconds = cfg.wall_time_in_metrics ? wall : 0.0;
      row.mean_gini = now.mean_gini;
      row.mean_entropy = now.mean_entropy;
      if (last_snapshot) row.mean_drift = last_snapshot->mean_drift;
      row.trainable_params = param_report(model.adapters).total;
      art.metrics.push_back(row);
      art.timing.push_back(StepTiming{step, row.phase, tb.tokens(), wall});

      if (scheduled && !pruned_at && completed >= *scheduled) {
        bool go = true;
        if (cfg.phase.drift_gate) {
          const bool met = last_snapshot && last_snapshot->mean_drift && *last_snapshot->mean_drift <= *cfg.phase.drift_gate;
          const bool timed_out = completed >= *scheduled + cfg.phase.drift_gate_grace || completed == total_steps;
          go = met || timed_out;
          if (!met && timed_out) {
            art.warnings.push_back("drift gate " + std::to_string(*cfg.phase.drift_gate) +
                                   " not reached by step " + std::to_string(completed) + "; pruning anyway");
          }
        }
        if (go) do_prune(completed);
      }
      ++step;
    }
  }

  if (!pruned_at) art.exploration_ledger = ledger;
  art.final_ledger = ledger;
  art.prune_step = pruned_at;
  art.params_final = param_report(model.adapters);
  try {
    art.throughput = measure_throughput(art.timing, cfg.throughput_warmup_skip);
  } catch (const std::invalid_argument& e) {
    art.warnings.push_back(e.what());
    art.throughput = measure_throughput(art.timing, 0);
  }
  art.eval_accuracy = evaluate(model, data.eval, cfg.phase.k);
  return art;
}

}  // namespace dmep
