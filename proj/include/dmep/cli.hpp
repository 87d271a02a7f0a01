// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the `dmep` executable. Each returns a
// process exit code: 0 success, 1 configuration or usage error, 2 runtime
// or data error.

#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <map>
#include <numeric>
#include <span>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dmep/config.hpp"
#include "dmep/io.hpp"
#include "dmep/trainer.hpp"

namespace dmep {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

namespace fs = std::filesystem;

inline std::map<ModuleId, BankShape> bank_shapes(const AdapterSet& adapters) {
  std::map<ModuleId, BankShape> out;
  for (const auto& [m, bank] : adapters) out[m] = shape_of(bank);
  return out;
}

// Shapes a ledger was recorded against, from the config and its counts.
inline std::map<ModuleId, BankShape> ledger_shapes(const TrainConfig& cfg, const RoutingLedger& ledger) {
  std::map<ModuleId, BankShape> out;
  for (const ModuleId& m : ledger.modules()) {
    const ModuleDims d = module_dims(cfg.backbone, m.kind);
    out[m] = BankShape{d.d_in, d.d_out, cfg.adapter.rank, ledger.counts(m).size()};
  }
  return out;
}

// Plan that keeps every expert; written for runs that never prune.
inline PruningPlan retain_all_plan(const RoutingLedger& ledger, const AdapterSet& adapters, double tau,
                                   std::size_t k_min, std::size_t step) {
  PruningPlan plan;
  plan.step = step;
  plan.tau = tau;
  plan.k_min = k_min;
  std::size_t total = 0;
  for (const auto& [m, bank] : adapters) {
    ModulePlan mp;
    mp.module = m;
    mp.n_before = bank.n_experts();
    mp.survivors.resize(mp.n_before);
    std::iota(mp.survivors.begin(), mp.survivors.end(), std::size_t{0});
    const auto& c = ledger.counts(m);
    const std::span<const std::uint64_t> cs(c);
    if (total_of(cs) > 0.0) {
      mp.scores = normalized(cs);
    } else {
      mp.never_routed = true;
    }
    mp.threshold_branch = false;
    mp.params_before = mp.params_after = trainable_param_count(bank);
    total += *mp.params_before;
    plan.modules.push_back(std::move(mp));
  }
  plan.params_before = plan.params_after = total;
  return plan;
}

struct KindRetention {
  ProjKind kind = ProjKind::Q;
  double mean_retained = 0.0;
};

struct RunReport {
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  double reduction_pct = 0.0;
  ThroughputSummary throughput;
  std::vector<KindRetention> retained_by_kind;  // in ProjKind order
  double attention_mean = 0.0;
  double mlp_mean = 0.0;
  std::size_t n_layers = 0;
  std::map<ModuleId, std::size_t> heatmap;  // survivors per module
};

// Everything printed by `report`, derived from the plan, the per-step
// metrics and the timing log of one run.
inline RunReport compute_report(const PruningPlan& plan, const std::vector<MetricsRow>& metrics,
                                const std::vector<StepTiming>& timing, std::size_t warmup_skip) {
  if (plan.modules.empty()) throw SchemaError("plan has no modules");
  if (!plan.params_before || !plan.params_after) throw SchemaError("plan lacks parameter totals");
  if (metrics.empty()) throw SchemaError("metrics.csv has no rows");
  RunReport r;
  r.params_before = *plan.params_before;
  r.params_after = *plan.params_after;
  if (metrics.front().trainable_params != r.params_before) {
    throw SchemaError("metrics.csv starts at " + std::to_string(metrics.front().trainable_params) +
                      " trainable parameters, plan.json says " + std::to_string(r.params_before));
  }
  if (metrics.back().step >= plan.step && metrics.back().trainable_params != r.params_after) {
    throw SchemaError("metrics.csv ends at " + std::to_string(metrics.back().trainable_params) +
                      " trainable parameters, plan.json says " + std::to_string(r.params_after));
  }
  r.reduction_pct = 100.0 * (1.0 - static_cast<double>(r.params_after) / static_cast<double>(r.params_before));
  try {
    r.throughput = measure_throughput(timing, warmup_skip);
  } catch (const std::invalid_argument&) {
    r.throughput = measure_throughput(timing, 0);
  }
  std::map<ProjKind, std::pair<double, std::size_t>> by_kind;
  double att = 0.0, mlp = 0.0;
  std::size_t n_att = 0, n_mlp = 0;
  for (const auto& mp : plan.modules) {
    const double n = static_cast<double>(mp.survivors.size());
    r.heatmap[mp.module] = mp.survivors.size();
    r.n_layers = std::max(r.n_layers, mp.module.layer + 1);
    by_kind[mp.module.kind].first += n;
    by_kind[mp.module.kind].second += 1;
    if (is_attention(mp.module.kind)) {
      att += n;
      ++n_att;
    } else {
      mlp += n;
      ++n_mlp;
    }
  }
  for (ProjKind k : kAllProjKinds) {
    auto it = by_kind.find(k);
    if (it == by_kind.end()) continue;
    r.retained_by_kind.push_back(KindRetention{k, it->second.first / static_cast<double>(it->second.second)});
  }
  if (n_att) r.attention_mean = att / static_cast<double>(n_att);
  if (n_mlp) r.mlp_mean = mlp / static_cast<double>(n_mlp);
  return r;
}

// Rows are projection kinds, columns layers; cells are surviving experts.
inline void write_heatmap_csv(std::ostream& os, const RunReport& r) {
  os << "kind";
  for (std::size_t l = 0; l < r.n_layers; ++l) os << ",L" << l;
  os << '\n';
  for (ProjKind k : kAllProjKinds) {
    os << to_string(k);
    for (std::size_t l = 0; l < r.n_layers; ++l) {
      auto it = r.heatmap.find(ModuleId{l, k});
      os << ',';
      if (it != r.heatmap.end()) os << it->second;
    }
    os << '\n';
  }
}

inline void print_report(std::ostream& os, const RunReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("n/a"); };
  os << "params_before " << r.params_before << '\n';
  os << "params_after " << r.params_after << '\n';
  os << "reduction_pct " << format_double(r.reduction_pct) << '\n';
  os << "pre_prune_tokens_per_second " << opt(r.throughput.pre.tokens_per_second) << '\n';
  os << "post_prune_tokens_per_second " << opt(r.throughput.post.tokens_per_second) << '\n';
  os << "pre_prune_median_step_seconds " << opt(r.throughput.pre.median_step_seconds) << '\n';
  os << "post_prune_median_step_seconds " << opt(r.throughput.post.median_step_seconds) << '\n';
  for (const auto& kr : r.retained_by_kind) {
    os << "mean_retained_experts " << to_string(kr.kind) << ' ' << format_double(kr.mean_retained) << '\n';
  }
  os << "mean_retained_experts attention " << format_double(r.attention_mean) << '\n';
  os << "mean_retained_experts mlp " << format_double(r.mlp_mean) << '\n';
}

inline ojson report_to_json(const RunReport& r, const RunArtifacts* art) {
  auto opt = [](const std::optional<double>& v) { return v ? ojson(*v) : ojson(); };
  ojson j;
  j["params_before"] = r.params_before;
  j["params_after"] = r.params_after;
  j["reduction_pct"] = r.reduction_pct;
  j["pre_prune_tokens_per_second"] = opt(r.throughput.pre.tokens_per_second);
  j["post_prune_tokens_per_second"] = opt(r.throughput.post.tokens_per_second);
  j["pre_prune_median_step_seconds"] = opt(r.throughput.pre.median_step_seconds);
  j["post_prune_median_step_seconds"] = opt(r.throughput.post.median_step_seconds);
  j["throughput_ratio"] = opt(r.throughput.ratio());
  ojson kinds = ojson::object();
  for (const auto& kr : r.retained_by_kind) kinds[std::string(to_string(kr.kind))] = kr.mean_retained;
  j["mean_retained_experts"] = std::move(kinds);
  j["mean_retained_attention"] = r.attention_mean;
  j["mean_retained_mlp"] = r.mlp_mean;
  if (art != nullptr) {
    j["eval_accuracy"] = art->eval_accuracy;
    j["prune_step"] = art->prune_step ? ojson(*art->prune_step) : ojson();
    j["total_steps"] = art->metrics.size();
    j["optimizer_state_elements"] = state_element_count(art->optimizer);
    j["adapter_checksum"] = hex64(art->model.adapter_checksum());
    j["warnings"] = art->warnings;
  }
  return j;
}

inline PruningPlan plan_for_artifacts(const RunArtifacts& art) {
  if (art.plan) return *art.plan;
  return retain_all_plan(art.final_ledger, art.model.adapters, art.config.phase.tau, art.config.phase.k_min,
                         art.metrics.size());
}

// Runs training and writes every artifact into cfg.output_dir.
inline RunArtifacts run_and_write(const RunConfig& cfg, std::ostream& log) {
  validate(cfg);
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  write_json(dir / "config.resolved.json", config_to_json(cfg));
  log << "training: " << cfg.train.total_steps() << " steps, output " << dir.string() << '\n';

  RunArtifacts art = train(cfg.train);

  {
    std::ostringstream os;
    write_metrics_csv(os, art.metrics);
    write_text_file(dir / "metrics.csv", os.str());
  }
  {
    std::ostringstream os;
    write_timing_csv(os, art.timing);
    write_text_file(dir / "timing.csv", os.str());
  }
  write_json(dir / "ledger.json", ledger_to_json(art.exploration_ledger, ledger_shapes(art.config, art.exploration_ledger)));
  write_json(dir / "ledger_final.json", ledger_to_json(art.final_ledger, bank_shapes(art.model.adapters)));
  const PruningPlan plan = plan_for_artifacts(art);
  write_json(dir / "plan.json", plan_to_json(plan, art.plan.has_value()));
  write_json(dir / "model.json", model_to_json(art.model, art.optimizer));
  const RunReport rep = compute_report(plan, art.metrics, art.timing, art.config.throughput_warmup_skip);
  write_json(dir / "report.json", report_to_json(rep, &art));
  {
    std::ostringstream os;
    write_heatmap_csv(os, rep);
    write_text_file(dir / "heatmap.csv", os.str());
  }
  for (const auto& w : art.warnings) log << "warning: " << w << '\n';
  log << "eval_accuracy " << format_double(art.eval_accuracy) << '\n';
  print_report(log, rep);
  return art;
}

inline int cmd_train(const std::optional<std::string>& config_path, const std::vector<std::string>& overrides,
                     std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  try {
    if (config_path) cfg = load_config(*config_path);
    for (const auto& o : overrides) apply_override(cfg, o);
    validate(cfg);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  try {
    run_and_write(cfg, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

// Survivor sets from a dumped ledger; the plan goes to out_path or `out`.
inline int cmd_plan(const std::string& ledger_path, double tau, std::size_t k_min,
                    const std::optional<std::string>& out_path, std::ostream& out, std::ostream& err) {
  if (!(tau > 0.0 && tau < 1.0)) {
    err << "config error: tau must lie in (0, 1)\n";
    return kExitConfig;
  }
  if (k_min == 0) {
    err << "config error: k_min must be positive\n";
    return kExitConfig;
  }
  try {
    const LedgerDump dump = ledger_from_json(read_json(ledger_path));
    std::size_t step = 0;
    for (const auto& m : dump.ledger.modules())
      if (!dump.ledger.history(m).empty()) step = std::max(step, dump.ledger.history(m).back().step);
    const PruningPlan plan = plan_from_counts(dump.counts, dump.shapes, tau, k_min, step);
    const std::string text = plan_to_json(plan, false).dump(2) + "\n";
    if (out_path) {
      write_text_file(*out_path, text);
    } else {
      out << text;
    }
    for (const auto& w : plan.warnings) err << "warning: " << w << '\n';
  } catch (const SchemaError& e) {
    err << "schema error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

inline int cmd_report(const std::string& run_dir, std::ostream& out, std::ostream& err) {
  try {
    const fs::path dir(run_dir);
    const PlanDump plan = plan_from_json(read_json(dir / "plan.json"));
    std::vector<MetricsRow> metrics;
    {
      std::istringstream is(read_text_file(dir / "metrics.csv"));
      metrics = read_metrics_csv(is);
    }
    std::vector<StepTiming> timing;
    if (fs::exists(dir / "timing.csv")) {
      std::istringstream is(read_text_file(dir / "timing.csv"));
      timing = read_timing_csv(is);
    }
    std::size_t skip = TrainConfig{}.throughput_warmup_skip;
    if (fs::exists(dir / "config.resolved.json")) {
      const auto cfg = read_json(dir / "config.resolved.json");
      if (cfg.contains("run.throughput_warmup_skip")) skip = cfg["run.throughput_warmup_skip"].get<std::size_t>();
    }
    const RunReport rep = compute_report(plan.plan, metrics, timing, skip);
    print_report(out, rep);
    std::ostringstream os;
    write_heatmap_csv(os, rep);
    write_text_file(dir / "heatmap.csv", os.str());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace dmep
