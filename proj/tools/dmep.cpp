// SPDX-License-Identifier: Apache-2.0
//
// dmep train | plan | report

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dmep/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"LoRA-MoE fine-tuning with one-shot module-wise expert pruning"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto* train = app.add_subcommand("train", "train a model and write run artifacts");
  train->add_option("-c,--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  train->add_option("-s,--set", overrides, "override a config key, key=value (repeatable)")->take_all();

  std::string ledger_path;
  double tau = 0.10;
  std::size_t k_min = 2;
  std::string plan_out;
  auto* plan = app.add_subcommand("plan", "compute survivor sets from a dumped ledger");
  plan->add_option("ledger", ledger_path, "ledger.json")->required();
  plan->add_option("--tau", tau, "utilization threshold")->capture_default_str();
  plan->add_option("--k-min", k_min, "minimum survivors per module")->capture_default_str();
  plan->add_option("-o,--out", plan_out, "write the plan here instead of standard output");

  std::string run_dir;
  auto* report = app.add_subcommand("report", "summarize a run directory and write heatmap.csv");
  report->add_option("run_dir", run_dir, "output directory of a train run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? dmep::kExitOk : dmep::kExitConfig;
  }

  if (*train) {
    return dmep::cmd_train(config_path.empty() ? std::nullopt : std::optional<std::string>(config_path), overrides,
                           std::cout, std::cerr);
  }
  if (*plan) {
    return dmep::cmd_plan(ledger_path, tau, k_min, plan_out.empty() ? std::nullopt : std::optional<std::string>(plan_out),
                          std::cout, std::cerr);
  }
  return dmep::cmd_report(run_dir, std::cout, std::cerr);
}
