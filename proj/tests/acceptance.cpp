// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "dmep/cli.hpp"
#include "oracles.hpp"

using namespace dmep;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  Matrix m(r, c);
  for (double& v : m.data()) v = nd(rng);
  return m;
}

std::vector<std::uint64_t> random_counts(std::mt19937_64& rng, std::size_t n) {
  std::vector<std::uint64_t> c(n);
  for (auto& v : c) v = rng() % 4 == 0 ? 0 : rng() % 1000;
  c[rng() % n] += 1;
  return c;
}

// Shared state for the criteria that need full training runs.
struct Runs {
  fs::path root;
  std::optional<RunArtifacts> main;
  std::optional<RunArtifacts> repeat;
  std::optional<RunArtifacts> control;
  std::optional<RunArtifacts> explore_aux;
  std::optional<RunArtifacts> explore_plain;

  RunConfig config(const std::string& name) const {
    RunConfig c;
    c.output_dir = (root / name).string();
    return c;
  }
};

Outcome metric_oracles() {
  Outcome o;
  std::mt19937_64 rng(1);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng() % 15;
    const auto c = random_counts(rng, n), d = random_counts(rng, n);
    const std::span<const std::uint64_t> cs(c), ds(d);
    const auto p = normalized(cs), q = normalized(ds);
    worst = std::max({worst, std::abs(gini(cs) - oracle::gini(c)), std::abs(entropy(cs) - oracle::entropy(c)),
                      std::abs(drift(p, q) - oracle::drift(p, q))});
  }
  o.require(worst <= 1e-12, "oracle disagreement " + fmt(worst));
  auto g = [](std::vector<std::uint64_t> c) { return gini(std::span<const std::uint64_t>(c)); };
  auto h = [](std::vector<std::uint64_t> c) { return entropy(std::span<const std::uint64_t>(c)); };
  o.require(g({5, 5, 5, 5}) == 0.0, "gini of uniform");
  o.require(std::abs(g({0, 0, 0, 1}) - 0.75) <= 1e-15, "gini of one-hot N=4");
  o.require(std::abs(h({5, 5, 5, 5}) - 1.0) <= 1e-15, "entropy of uniform");
  o.require(h({0, 3, 0}) == 0.0, "entropy of one-hot");
  o.require(std::abs(drift(std::vector<double>{1, 0}, std::vector<double>{0, 1}) - 2.0) <= 1e-15, "drift of disjoint");
  o.note("1000 random vectors, max |err| " + fmt(worst));
  return o;
}

Outcome survivor_oracle() {
  Outcome o;
  std::mt19937_64 rng(2);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng() % 15;
    const auto c = random_counts(rng, n);
    const auto s = normalized(std::span<const std::uint64_t>(c));
    const double tau = 0.01 + 0.3 * static_cast<double>(rng() % 1000) / 1000.0;
    const std::size_t k_min = 1 + rng() % n;
    const auto got = survivor_set(s, tau, k_min);
    if (got != oracle::survivors(s, tau, k_min) || got.size() < k_min) ++mismatches;
  }
  o.require(mismatches == 0, std::to_string(mismatches) + " mismatches");
  using V = std::vector<std::size_t>;
  o.require(survivor_set(std::vector<double>{0.3, 0.3, 0.2, 0.2}, 0.10, 2) == V{0, 1, 2, 3}, "example keep-all");
  o.require(survivor_set(std::vector<double>{0.05, 0.05, 0.45, 0.45}, 0.10, 2) == V{2, 3}, "example threshold");
  o.require(survivor_set(std::vector<double>{0.02, 0.03, 0.05, 0.90}, 0.10, 2) == V{2, 3}, "example fallback");
  const std::vector<double> uniform(8, 0.125);
  o.require(survivor_set(uniform, 0.10, 2).size() == 8, "uniform tau 0.10");
  o.require(survivor_set(uniform, 0.20, 2) == V{0, 1}, "uniform tau 0.20");
  o.note("1000 random vectors, " + std::to_string(mismatches) + " mismatches");
  return o;
}

Outcome gradient_check() {
  Outcome o;
  BackboneConfig bc;
  bc.vocab_size = 24;
  bc.d_model = 16;
  bc.n_layers = 2;
  bc.n_heads = 2;
  bc.d_ff = 24;
  Model model;
  model.backbone = init_backbone(bc, 11);
  model.adapters = init_adapters(model.backbone, AdapterConfig{4, 2, 16.0}, 12);
  std::mt19937_64 rng(13);
  for (auto& [_, bank] : model.adapters) bank.b_stack = random_matrix(bank.b_stack.rows(), bank.b_stack.cols(), rng, 0.1);
  std::vector<std::vector<std::size_t>> seqs(2, std::vector<std::size_t>(8));
  for (auto& s : seqs)
    for (auto& t : s) t = rng() % bc.vocab_size;
  const TokenBatch tb = TokenBatch::from_sequences(seqs);
  const std::vector<std::size_t> labels{3, 17};

  for (double lambda : {0.0, 0.01}) {
    const LossBreakdown base = compute_loss(model, tb, labels, 2, lambda, nullptr, true);
    std::vector<BlockId> ids;
    std::vector<Matrix> params, analytic;
    for (const auto& [id, g] : base.grads) {
      ids.push_back(id);
      params.push_back(block_of(model.adapters.at(id.module), id.part));
      analytic.push_back(g);
    }
    auto fn = [&](const std::vector<Matrix>& p) {
      Model m = model;
      for (std::size_t i = 0; i < ids.size(); ++i) block_of(m.adapters.at(ids[i].module), ids[i].part) = p[i];
      const LossBreakdown l = compute_loss(m, tb, labels, 2, lambda, nullptr, false);
      return ad::LossProbe{l.total, l.selection_fingerprint};
    };
    const ad::GradCheckResult r = ad::grad_check(fn, params, analytic);
    const std::string tag = lambda == 0.0 ? "task" : "task+aux";
    o.require(r.max_relative_error <= 1e-4, tag + " rel err " + fmt(r.max_relative_error));
    o.require(r.skip_rate() < 0.05, tag + " skip rate " + fmt(r.skip_rate()));
    o.note(tag + ": " + std::to_string(r.checked) + " coords, max rel err " + fmt(r.max_relative_error, 3) +
           ", skipped " + fmt(100.0 * r.skip_rate(), 3) + "%");
  }
  return o;
}

Outcome masked_equals_pruned() {
  Outcome o;
  BackboneConfig bc;
  bc.vocab_size = 24;
  bc.d_model = 16;
  bc.n_heads = 2;
  bc.d_ff = 24;
  double worst = 0.0;
  bool rows_ok = true;
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Backbone bb = init_backbone(bc, 100 + trial);
    AdapterSet adapters = init_adapters(bb, AdapterConfig{6, 2, 16.0}, 200 + trial);
    for (auto& [_, bank] : adapters) bank.b_stack = random_matrix(bank.b_stack.rows(), bank.b_stack.cols(), rng, 0.1);
    OptimizerState opt = init_optimizer(adapters, AdamWConfig{});
    for (auto& [_, mom] : opt.blocks) {
      mom.m = random_matrix(mom.m.rows(), mom.m.cols(), rng);
      mom.v = random_matrix(mom.v.rows(), mom.v.cols(), rng);
      for (double& v : mom.v.data()) v = std::abs(v);
    }
    RoutingLedger ledger;
    for (const auto& [m, bank] : adapters) {
      ledger.add_module(m, bank.n_experts());
      ledger.set_counts(m, random_counts(rng, bank.n_experts()));
    }
    const PruningPlan plan = build_pruning_plan(ledger, adapters, 0.15, 2, 1);
    std::vector<std::vector<std::size_t>> seqs(3, std::vector<std::size_t>(7));
    for (auto& s : seqs)
      for (auto& t : s) t = rng() % bc.vocab_size;
    const TokenBatch tb = TokenBatch::from_sequences(seqs);

    const auto masks = keep_masks(plan);
    ForwardOptions fo;
    fo.expert_masks = &masks;
    ad::Tape tape;
    const Matrix masked = forward_on_tape(tape, bb, &adapters, tb, fo).logits.value();

    const AdapterSet before = adapters;
    const OptimizerState opt_before = opt;
    apply_plan(adapters, opt, &ledger, plan);
    const Matrix pruned = forward(bb, adapters, tb, 2);
    for (std::size_t i = 0; i < masked.size(); ++i) worst = std::max(worst, std::abs(masked.data()[i] - pruned.data()[i]));

    for (const auto& mp : plan.modules) {
      for (StackPart p : kStackParts) {
        const BlockId id{mp.module, p};
        const Matrix& now = block_of(adapters.at(mp.module), p);
        const Matrix& old = block_of(before.at(mp.module), p);
        for (std::size_t j = 0; j < mp.survivors.size(); ++j) {
          auto same = [&](const Matrix& a, const Matrix& b) {
            const auto ra = a.row(j), rb = b.row(mp.survivors[j]);
            return std::equal(ra.begin(), ra.end(), rb.begin(), rb.end());
          };
          rows_ok = rows_ok && same(now, old) && same(opt.at(id).m, opt_before.at(id).m) &&
                    same(opt.at(id).v, opt_before.at(id).v);
        }
      }
    }
  }
  o.require(worst <= 1e-10, "max |masked - pruned| " + fmt(worst));
  o.require(rows_ok, "retained rows or moments not bit-identical");
  o.note("20 triples, max |masked - pruned| " + fmt(worst, 3));
  return o;
}

Outcome accounting(const Runs& runs) {
  Outcome o;
  const TrainConfig cfg;
  Model model = init_model(cfg);
  OptimizerState opt = init_optimizer(model.adapters, cfg.optim.adamw);
  o.require(param_report(model.adapters).total == 32256, "initial params");
  o.require(state_element_count(opt) == 64512, "initial state");
  RoutingLedger ledger;
  for (const auto& [m, bank] : model.adapters) {
    ledger.add_module(m, bank.n_experts());
    ledger.set_counts(m, {10, 10, 10, 970, 0, 0, 0, 0});
  }
  const PruningPlan plan = build_pruning_plan(ledger, model.adapters, 0.10, 2, 1);
  const PruneReport rep = apply_plan(model.adapters, opt, &ledger, plan);
  o.require(rep.params_after == 14 * 576, "params after collapse plan " + std::to_string(rep.params_after));
  o.require(state_element_count(opt) == 2 * 14 * 576, "state after collapse plan");

  const RunArtifacts& art = *runs.main;
  std::size_t expected = 0;
  for (const auto& mp : art.plan->modules) {
    const ExpertBank& b = art.model.adapters.at(mp.module);
    o.require(b.n_experts() == mp.survivors.size(), mp.module.name() + " bank size");
    o.require(b.a_stack.rows() == mp.survivors.size() && b.b_stack.rows() == mp.survivors.size(),
              mp.module.name() + " stack rows");
    expected += mp.survivors.size() * (b.rank * (b.d_in + b.d_out) + b.d_in);
  }
  o.require(art.params_final.total == expected, "run params after");
  o.require(*art.plan->params_after == expected, "plan params after");
  o.require(state_element_count(art.optimizer) == 2 * expected, "run optimizer state");
  o.note("default run: " + std::to_string(*art.plan->params_before) + " -> " + std::to_string(expected) +
         " params, state " + std::to_string(state_element_count(art.optimizer)));
  return o;
}

Outcome prune_vs_control(const Runs& runs) {
  Outcome o;
  const RunArtifacts& art = *runs.main;
  const RunArtifacts& ctl = *runs.control;
  o.require(art.plan.has_value(), "no prune happened");
  if (!art.plan) return o;
  o.require(art.params_final.total < art.params_initial.total, "params did not decrease");
  for (const auto& [m, n] : art.params_final.experts) o.require(n >= 2, m.name() + " kept " + std::to_string(n));
  const double gap = 100.0 * (ctl.eval_accuracy - art.eval_accuracy);
  o.require(gap <= 2.0, "accuracy gap " + fmt(gap) + " pp");
  const auto pre = art.throughput.pre.median_step_seconds, post = art.throughput.post.median_step_seconds;
  o.require(pre && post, "missing step timings");
  if (pre && post) o.require(*post <= *pre, "post-prune step " + fmt(*post) + "s > pre-prune " + fmt(*pre) + "s");
  const double reduction = 100.0 * (1.0 - static_cast<double>(art.params_final.total) /
                                              static_cast<double>(art.params_initial.total));
  o.note("params " + std::to_string(art.params_initial.total) + " -> " + std::to_string(art.params_final.total) + " (" +
         fmt(reduction, 3) + "% fewer), acc " + fmt(art.eval_accuracy) + " vs control " + fmt(ctl.eval_accuracy) +
         ", median step " + (pre ? fmt(*pre, 3) : "n/a") + "s -> " + (post ? fmt(*post, 3) : "n/a") + "s");
  return o;
}

std::optional<double> last_entropy(const RunArtifacts& a) {
  for (auto it = a.metrics.rbegin(); it != a.metrics.rend(); ++it)
    if (it->mean_entropy) return it->mean_entropy;
  return std::nullopt;
}

Outcome entropy_ordering(const Runs& runs) {
  Outcome o;
  const auto with = last_entropy(*runs.explore_aux), without = last_entropy(*runs.explore_plain);
  o.require(with && without, "missing entropy");
  if (with && without) {
    o.require(*with > *without, "entropy with aux " + fmt(*with) + " <= without " + fmt(*without));
    o.note("mean normalized entropy after one epoch: lambda 0.01 " + fmt(*with) + ", lambda 0 " + fmt(*without));
  }
  return o;
}

Outcome drift_settles(const Runs& runs) {
  Outcome o;
  std::vector<double> d;
  for (const auto& row : runs.explore_aux->metrics)
    if (row.mean_drift && (d.empty() || d.back() != *row.mean_drift)) d.push_back(*row.mean_drift);
  o.require(d.size() >= 2, "fewer than two drift values");
  if (d.size() >= 2) {
    o.require(d.back() <= d.front(), "last drift " + fmt(d.back()) + " > first " + fmt(d.front()));
    o.note(std::to_string(d.size()) + " snapshots, drift " + fmt(d.front()) + " -> " + fmt(d.back()));
  }
  return o;
}

Outcome reproducible(const Runs& runs) {
  Outcome o;
  const fs::path a = runs.root / "main", b = runs.root / "repeat";
  const std::string ma = read_text_file(a / "metrics.csv"), mb = read_text_file(b / "metrics.csv");
  o.require(!ma.empty() && ma == mb, "metrics.csv differs");
  const auto ca = read_json(a / "report.json")["adapter_checksum"], cb = read_json(b / "report.json")["adapter_checksum"];
  o.require(ca == cb, "adapter checksum differs");
  o.require(runs.main->model.adapter_checksum() == runs.repeat->model.adapter_checksum(), "in-memory checksum differs");
  o.note("metrics.csv " + std::to_string(ma.size()) + " bytes identical, checksum " + ca.get<std::string>());
  return o;
}

Outcome dense_limit_and_lambda(const Runs& runs) {
  Outcome o;
  std::mt19937_64 rng(10);
  const std::size_t d_in = 32, d_out = 24, r = 4;
  ExpertBank bank = init_expert_bank(ModuleId{0, ProjKind::Up}, d_in, d_out, r, 1, 16.0, 3);
  bank.b_stack = random_matrix(1, d_out * r, rng, 0.2);
  const Matrix w0 = random_matrix(d_out, d_in, rng);
  const Matrix x = random_matrix(100, d_in, rng);
  const Matrix moe = adapter_forward(bank, x, route(bank, x, 1));
  const Matrix base = kernels::matmul_nt(x, w0);
  const Matrix ba = kernels::matmul(bank.expert_b(0), bank.expert_a(0));
  const Matrix lora = kernels::matmul_nt(x, ba);
  double worst = 0.0;
  for (std::size_t i = 0; i < moe.size(); ++i) {
    const double dense = base.data()[i] + bank.scaling() * lora.data()[i];
    worst = std::max(worst, std::abs(base.data()[i] + moe.data()[i] - dense));
  }
  o.require(worst <= 1e-12, "N=1 k=1 vs dense LoRA " + fmt(worst));

  const RunArtifacts& art = *runs.main;
  bool switch_ok = art.prune_step.has_value();
  for (const auto& row : art.metrics) {
    const double want = art.prune_step && row.step >= *art.prune_step ? 0.0 : art.config.phase.lambda;
    switch_ok = switch_ok && row.lambda == want;
  }
  o.require(switch_ok, "lambda column does not switch at the prune step");
  o.note("100 inputs, max |moe - dense| " + fmt(worst, 3) + "; lambda " + fmt(art.config.phase.lambda) +
         " -> 0 at step " + (art.prune_step ? std::to_string(*art.prune_step) : "none"));
  return o;
}

}  // namespace

int main() {
  Runs runs;
  runs.root = fs::temp_directory_path() / "dmep_acceptance";
  fs::remove_all(runs.root);
  fs::create_directories(runs.root);

  std::ostringstream log;
  try {
    std::cout << "training default run, repeat and control..." << std::endl;
    runs.main = run_and_write(runs.config("main"), log);
    runs.repeat = run_and_write(runs.config("repeat"), log);
    RunConfig ctl = runs.config("control");
    ctl.train.phase.prune_enabled = false;
    runs.control = run_and_write(ctl, log);
    TrainConfig explore;
    explore.phase.epochs = 1;
    explore.phase.prune_enabled = false;
    runs.explore_aux = train(explore);
    explore.phase.lambda = 0.0;
    runs.explore_plain = train(explore);
  } catch (const std::exception& e) {
    std::cout << "FAIL setup: " << e.what() << '\n';
    return 1;
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"routing metrics match independent oracles", metric_oracles},
      {"survivor sets match the two-branch oracle", survivor_oracle},
      {"analytic gradients match finite differences", gradient_check},
      {"masked routing equals the pruned model", masked_equals_pruned},
      {"parameter and optimizer-state accounting", [&] { return accounting(runs); }},
      {"pruned run vs unpruned control", [&] { return prune_vs_control(runs); }},
      {"auxiliary loss raises routing entropy", [&] { return entropy_ordering(runs); }},
      {"routing drift settles during exploration", [&] { return drift_settles(runs); }},
      {"runs are reproducible", [&] { return reproducible(runs); }},
      {"dense limit and lambda switch", [&] { return dense_limit_and_lambda(runs); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("exception: ") + e.what();
    }
    failures += out.pass ? 0 : 1;
    std::cout << (out.pass ? "PASS" : "FAIL") << " [" << (i + 1) << "] " << criteria[i].first << ": " << out.detail
              << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failures)) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failures == 0 ? 0 : 1;
}
