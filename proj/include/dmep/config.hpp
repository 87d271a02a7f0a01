// SPDX-License-Identifier: Apache-2.0
//
// Run configuration as flat dotted keys ("phase.tau", "optim.lr", ...).
// Files are JSON objects; nested objects are flattened, so {"phase":{"tau":
// 0.1}} and {"phase.tau": 0.1} are the same key. Unknown keys are errors.

#pragma once

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dmep/trainer.hpp"

namespace dmep {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kOutputRootEnv = "DMEP_OUTPUT_ROOT";

inline std::string default_output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return (env != nullptr && *env != '\0') ? std::string(env) : std::string("runs");
}

struct RunConfig {
  TrainConfig train;
  std::string output_dir = default_output_root() + "/default";
};

namespace detail {

inline std::size_t want_uint(const json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<std::size_t>(v.get<long long>());
  throw ConfigError(key + ": expected a non-negative integer, got " + v.dump());
}

inline double want_number(const json& v, const std::string& key) {
  if (v.is_number()) return v.get<double>();
  throw ConfigError(key + ": expected a number, got " + v.dump());
}

inline bool want_bool(const json& v, const std::string& key) {
  if (v.is_boolean()) return v.get<bool>();
  throw ConfigError(key + ": expected true or false, got " + v.dump());
}

}  // namespace detail

struct ConfigKey {
  std::string key;
  std::string help;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

#define DMEP_UINT_KEY(name, field, help)                                                                           \
  ConfigKey {                                                                                                      \
    name, help, [](const RunConfig& c) { return json(c.field); },                                                 \
        [](RunConfig& c, const json& v) { c.field = detail::want_uint(v, name); }                                  \
  }
#define DMEP_NUM_KEY(name, field, help)                                                                            \
  ConfigKey {                                                                                                      \
    name, help, [](const RunConfig& c) { return json(c.field); },                                                 \
        [](RunConfig& c, const json& v) { c.field = detail::want_number(v, name); }                                \
  }
#define DMEP_BOOL_KEY(name, field, help)                                                                           \
  ConfigKey {                                                                                                      \
    name, help, [](const RunConfig& c) { return json(c.field); },                                                 \
        [](RunConfig& c, const json& v) { c.field = detail::want_bool(v, name); }                                  \
  }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      DMEP_UINT_KEY("backbone.vocab_size", train.backbone.vocab_size, "vocabulary size (shared with the task)"),
      DMEP_UINT_KEY("backbone.d_model", train.backbone.d_model, "hidden width"),
      DMEP_UINT_KEY("backbone.n_layers", train.backbone.n_layers, "transformer layers"),
      DMEP_UINT_KEY("backbone.n_heads", train.backbone.n_heads, "attention heads"),
      DMEP_UINT_KEY("backbone.d_ff", train.backbone.d_ff, "MLP width"),
      DMEP_UINT_KEY("adapter.n_experts", train.adapter.n_experts, "experts per module before pruning"),
      DMEP_UINT_KEY("adapter.rank", train.adapter.rank, "LoRA rank per expert"),
      DMEP_NUM_KEY("adapter.alpha", train.adapter.alpha, "LoRA alpha; delta is scaled by alpha/rank"),
      DMEP_UINT_KEY("phase.epochs", train.phase.epochs, "total epochs"),
      DMEP_UINT_KEY("phase.warmup_epochs", train.phase.warmup_epochs, "exploration epochs before the prune"),
      ConfigKey{"phase.prune_at_step", "completed-step count to prune at; null means end of warm-up",
                [](const RunConfig& c) { return c.train.phase.prune_at_step ? json(*c.train.phase.prune_at_step) : json(); },
                [](RunConfig& c, const json& v) {
                  if (v.is_null()) {
                    c.train.phase.prune_at_step.reset();
                  } else {
                    c.train.phase.prune_at_step = detail::want_uint(v, "phase.prune_at_step");
                  }
                }},
      DMEP_BOOL_KEY("phase.prune_enabled", train.phase.prune_enabled, "false trains without pruning"),
      DMEP_NUM_KEY("phase.tau", train.phase.tau, "utilization threshold"),
      DMEP_UINT_KEY("phase.k_min", train.phase.k_min, "minimum survivors per module"),
      DMEP_NUM_KEY("phase.lambda", train.phase.lambda, "balancing loss weight before the prune"),
      DMEP_UINT_KEY("phase.k", train.phase.k, "experts per token"),
      ConfigKey{"phase.drift_gate", "mean drift required before pruning; null disables",
                [](const RunConfig& c) { return c.train.phase.drift_gate ? json(*c.train.phase.drift_gate) : json(); },
                [](RunConfig& c, const json& v) {
                  if (v.is_null()) {
                    c.train.phase.drift_gate.reset();
                  } else {
                    c.train.phase.drift_gate = detail::want_number(v, "phase.drift_gate");
                  }
                }},
      DMEP_UINT_KEY("phase.drift_gate_grace", train.phase.drift_gate_grace, "steps to wait for the drift gate"),
      DMEP_UINT_KEY("phase.delta_t", train.phase.delta_t, "steps between routing snapshots"),
      DMEP_NUM_KEY("optim.lr", train.optim.lr, "peak learning rate"),
      DMEP_NUM_KEY("optim.warmup_frac", train.optim.warmup_frac, "linear warm-up fraction of all steps"),
      DMEP_UINT_KEY("optim.batch_size", train.optim.batch_size, "sequences per step"),
      DMEP_NUM_KEY("optim.beta1", train.optim.adamw.beta1, "AdamW beta1"),
      DMEP_NUM_KEY("optim.beta2", train.optim.adamw.beta2, "AdamW beta2"),
      DMEP_NUM_KEY("optim.eps", train.optim.adamw.eps, "AdamW epsilon"),
      DMEP_NUM_KEY("optim.weight_decay", train.optim.adamw.weight_decay, "decoupled weight decay"),
      DMEP_UINT_KEY("task.n_clusters", train.task.n_clusters, "clusters in the synthetic task"),
      DMEP_UINT_KEY("task.seq_len", train.task.seq_len, "tokens per sequence"),
      DMEP_UINT_KEY("task.n_train", train.task.n_train, "training examples"),
      DMEP_UINT_KEY("task.n_eval", train.task.n_eval, "held-out examples"),
      DMEP_UINT_KEY("task.label_arity", train.task.label_arity, "number of labels"),
      ConfigKey{"task.skew", "per-cluster sampling weights; empty means balanced",
                [](const RunConfig& c) { return json(c.train.task.skew); },
                [](RunConfig& c, const json& v) {
                  if (!v.is_array()) throw ConfigError("task.skew: expected an array of numbers, got " + v.dump());
                  std::vector<double> w;
                  for (const auto& e : v) w.push_back(detail::want_number(e, "task.skew"));
                  c.train.task.skew = std::move(w);
                }},
      DMEP_NUM_KEY("task.margin", train.task.margin, "minimum label score gap"),
      DMEP_UINT_KEY("seed.backbone", train.backbone_seed, "frozen backbone seed"),
      DMEP_UINT_KEY("seed.adapters", train.adapter_seed, "adapter initialization seed"),
      DMEP_UINT_KEY("seed.data", train.data_seed, "task generation and shuffling seed"),
      DMEP_UINT_KEY("run.throughput_warmup_skip", train.throughput_warmup_skip,
                    "steps skipped at the start of each throughput window"),
      DMEP_BOOL_KEY("run.wall_time_in_metrics", train.wall_time_in_metrics,
                    "write measured step time into metrics.csv (breaks byte-identical reruns)"),
      ConfigKey{"run.output_dir", "artifact directory",
                [](const RunConfig& c) { return json(c.output_dir); },
                [](RunConfig& c, const json& v) {
                  if (!v.is_string()) throw ConfigError("run.output_dir: expected a string, got " + v.dump());
                  c.output_dir = v.get<std::string>();
                }},
  };
  return keys;
}

#undef DMEP_UINT_KEY
#undef DMEP_NUM_KEY
#undef DMEP_BOOL_KEY

// Exact key, or a bare name that is the last segment of exactly one key
// ("tau" -> "phase.tau").
inline const ConfigKey& find_config_key(std::string_view name) {
  const ConfigKey* hit = nullptr;
  std::vector<std::string> candidates;
  for (const auto& k : config_keys()) {
    if (k.key == name) return k;
    const auto dot = k.key.rfind('.');
    if (name.find('.') == std::string_view::npos && k.key.substr(dot + 1) == name) {
      hit = &k;
      candidates.push_back(k.key);
    }
  }
  if (candidates.size() == 1) return *hit;
  if (candidates.size() > 1) {
    std::string msg = "ambiguous config key '" + std::string(name) + "':";
    for (const auto& c : candidates) msg += " " + c;
    throw ConfigError(msg);
  }
  throw ConfigError("unknown config key '" + std::string(name) + "'");
}

inline ordered_json config_to_json(const RunConfig& c) {
  ordered_json j = ordered_json::object();
  for (const auto& k : config_keys()) j[k.key] = k.get(c);
  return j;
}

inline void validate(const RunConfig& c) {
  try {
    c.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

namespace detail {

inline std::size_t line_of_offset(std::string_view text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

// Line of the first occurrence of "name" as a JSON key, or 0 if not found.
inline std::size_t line_of_key(std::string_view text, std::string_view name) {
  const std::string quoted = "\"" + std::string(name) + "\"";
  std::size_t pos = 0;
  while ((pos = text.find(quoted, pos)) != std::string_view::npos) {
    std::size_t after = pos + quoted.size();
    while (after < text.size() && (text[after] == ' ' || text[after] == '\t' || text[after] == '\r' || text[after] == '\n'))
      ++after;
    if (after < text.size() && text[after] == ':') return line_of_offset(text, pos);
    pos = after;
  }
  return 0;
}

inline void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, const json*>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      flatten(*it, key, out);
    } else {
      out.emplace_back(key, &*it);
    }
  }
}

}  // namespace detail

// Parses config text on top of the defaults. Errors carry "origin:line:".
inline RunConfig parse_config(std::string_view text, const std::string& origin = "<config>") {
  json j;
  try {
    j = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    const std::size_t line = detail::line_of_offset(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ConfigError(origin + ":" + std::to_string(line) + ": malformed JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError(origin + ":1: top level must be an object");
  std::vector<std::pair<std::string, const json*>> entries;
  detail::flatten(j, "", entries);
  RunConfig cfg;
  for (const auto& [key, value] : entries) {
    const std::string leaf = key.substr(key.rfind('.') + 1);
    const std::size_t line = detail::line_of_key(text, key) != 0 ? detail::line_of_key(text, key)
                                                                : detail::line_of_key(text, leaf);
    const std::string where = origin + ":" + std::to_string(line) + ": ";
    const ConfigKey* spec = nullptr;
    for (const auto& k : config_keys())
      if (k.key == key) spec = &k;
    if (spec == nullptr) throw ConfigError(where + "unknown config key '" + key + "'");
    try {
      spec->set(cfg, *value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

// "key=value"; the value is read as JSON when it parses, else as a string.
inline void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("--set " + std::string(assignment) + ": expected key=value");
  }
  const std::string_view name = assignment.substr(0, eq);
  const std::string raw(assignment.substr(eq + 1));
  const ConfigKey& spec = find_config_key(name);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  try {
    spec.set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError("--set " + std::string(assignment) + ": " + e.what());
  }
}

}  // namespace dmep
