// SPDX-License-Identifier: Apache-2.0
//
// Artifact formats: CSV time series, JSON ledgers, plans and model dumps.

#pragma once

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dmep/backbone.hpp"
#include "dmep/optimizer.hpp"
#include "dmep/pruner.hpp"
#include "dmep/routing_ledger.hpp"
#include "dmep/trainer.hpp"

namespace dmep {

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kLedgerSchema = "dmep.ledger";
inline constexpr const char* kPlanSchema = "dmep.plan";
inline constexpr const char* kModelSchema = "dmep.model";
inline constexpr int kSchemaVersion = 1;

// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + p.string());
}

// ---- CSV ------------------------------------------------------------------

inline constexpr const char* kMetricsHeader =
    "step,epoch,phase,lambda,task_loss,aux_loss,total_loss,tokens,step_wall_seconds,mean_gini,mean_entropy,"
    "mean_drift,trainable_params";
inline constexpr const char* kTimingHeader = "step,phase,tokens,wall_seconds";

namespace detail {

inline std::string opt_field(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw SchemaError(what + ": not a number: '" + s + "'");
  }
  if (used != s.size()) throw SchemaError(what + ": trailing characters in '" + s + "'");
  return v;
}

inline std::size_t parse_uint(const std::string& s, const std::string& what) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw SchemaError(what + ": not a non-negative integer: '" + s + "'");
  }
  return static_cast<std::size_t>(std::stoull(s));
}

inline std::optional<double> parse_opt(const std::string& s, const std::string& what) {
  if (s.empty()) return std::nullopt;
  return parse_double(s, what);
}

}  // namespace detail

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os << kMetricsHeader << '\n';
  for (const auto& r : rows) {
    os << r.step << ',' << r.epoch << ',' << r.phase << ',' << format_double(r.lambda) << ','
       << format_double(r.task_loss) << ',' << format_double(r.aux_loss) << ',' << format_double(r.total_loss) << ','
       << r.tokens << ',' << format_double(r.step_wall_seconds) << ',' << detail::opt_field(r.mean_gini) << ','
       << detail::opt_field(r.mean_entropy) << ',' << detail::opt_field(r.mean_drift) << ',' << r.trainable_params
       << '\n';
  }
}

inline std::vector<MetricsRow> read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw SchemaError("metrics.csv: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kMetricsHeader) throw SchemaError("metrics.csv: unexpected header '" + line + "'");
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    const std::string where = "metrics.csv line " + std::to_string(lineno);
    if (f.size() != 13) throw SchemaError(where + ": expected 13 fields, got " + std::to_string(f.size()));
    MetricsRow r;
    r.step = detail::parse_uint(f[0], where);
    r.epoch = detail::parse_uint(f[1], where);
    r.phase = f[2];
    r.lambda = detail::parse_double(f[3], where);
    r.task_loss = detail::parse_double(f[4], where);
    r.aux_loss = detail::parse_double(f[5], where);
    r.total_loss = detail::parse_double(f[6], where);
    r.tokens = detail::parse_uint(f[7], where);
    r.step_wall_seconds = detail::parse_double(f[8], where);
    r.mean_gini = detail::parse_opt(f[9], where);
    r.mean_entropy = detail::parse_opt(f[10], where);
    r.mean_drift = detail::parse_opt(f[11], where);
    r.trainable_params = detail::parse_uint(f[12], where);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_timing_csv(std::ostream& os, const std::vector<StepTiming>& rows) {
  os << kTimingHeader << '\n';
  for (const auto& r : rows) os << r.step << ',' << r.phase << ',' << r.tokens << ',' << format_double(r.wall_seconds) << '\n';
}

inline std::vector<StepTiming> read_timing_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw SchemaError("timing.csv: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kTimingHeader) throw SchemaError("timing.csv: unexpected header '" + line + "'");
  std::vector<StepTiming> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    const std::string where = "timing.csv line " + std::to_string(lineno);
    if (f.size() != 4) throw SchemaError(where + ": expected 4 fields");
    rows.push_back(StepTiming{detail::parse_uint(f[0], where), f[1], detail::parse_uint(f[2], where),
                              detail::parse_double(f[3], where)});
  }
  return rows;
}

// ---- JSON helpers ---------------------------------------------------------

using ojson = nlohmann::ordered_json;

namespace detail {

inline void check_schema(const nlohmann::json& j, const char* schema) {
  if (!j.is_object()) throw SchemaError(std::string(schema) + ": top level must be an object");
  if (!j.contains("schema") || j["schema"] != schema) {
    throw SchemaError(std::string("expected schema '") + schema + "'");
  }
  if (!j.contains("version") || j["version"] != kSchemaVersion) {
    throw SchemaError(std::string(schema) + ": unsupported version");
  }
}

template <class T>
T field(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw SchemaError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(where + ": bad field '" + key + "': " + e.what());
  }
}

inline ModuleId module_from_json(const nlohmann::json& j, const std::string& where) {
  const auto layer = field<std::size_t>(j, "layer", where);
  const auto kind_s = field<std::string>(j, "kind", where);
  const auto kind = parse_proj_kind(kind_s);
  if (!kind) throw SchemaError(where + ": unknown projection kind '" + kind_s + "'");
  return ModuleId{layer, *kind};
}

inline ojson opt_json(const std::optional<double>& v) { return v ? ojson(*v) : ojson(); }

inline std::optional<double> opt_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  if (!j.is_number()) throw SchemaError("expected a number or null");
  return j.get<double>();
}

}  // namespace detail

// ---- ledger ---------------------------------------------------------------

inline ojson ledger_to_json(const RoutingLedger& ledger, const std::map<ModuleId, BankShape>& shapes = {}) {
  ojson j;
  j["schema"] = kLedgerSchema;
  j["version"] = kSchemaVersion;
  j["delta_t"] = ledger.delta_t();
  j["modules"] = ojson::array();
  for (const ModuleId& m : ledger.modules()) {
    ojson e;
    e["module"] = m.name();
    e["layer"] = m.layer;
    e["kind"] = std::string(to_string(m.kind));
    e["counts"] = ledger.counts(m);
    auto sh = shapes.find(m);
    if (sh != shapes.end()) {
      e["shape"] = {{"d_in", sh->second.d_in}, {"d_out", sh->second.d_out}, {"rank", sh->second.rank}};
    }
    ojson snaps = ojson::array();
    for (const auto& s : ledger.snapshots(m)) snaps.push_back({{"step", s.step}, {"distribution", s.distribution}});
    e["snapshots"] = std::move(snaps);
    ojson hist = ojson::array();
    for (const auto& h : ledger.history(m)) {
      hist.push_back({{"step", h.step},
                      {"empty", h.empty},
                      {"gini", h.gini},
                      {"entropy", detail::opt_json(h.entropy)},
                      {"drift", detail::opt_json(h.drift)}});
    }
    e["history"] = std::move(hist);
    j["modules"].push_back(std::move(e));
  }
  return j;
}

struct LedgerDump {
  RoutingLedger ledger;
  std::map<ModuleId, std::vector<std::uint64_t>> counts;
  std::map<ModuleId, BankShape> shapes;  // modules whose dump carries a shape
};

inline LedgerDump ledger_from_json(const nlohmann::json& j) {
  detail::check_schema(j, kLedgerSchema);
  LedgerDump out{RoutingLedger(detail::field<std::size_t>(j, "delta_t", "ledger")), {}, {}};
  if (!j.contains("modules") || !j["modules"].is_array() || j["modules"].empty()) {
    throw SchemaError("ledger: 'modules' must be a non-empty array");
  }
  std::size_t idx = 0;
  for (const auto& e : j["modules"]) {
    const std::string where = "ledger module #" + std::to_string(idx++);
    const ModuleId m = detail::module_from_json(e, where);
    if (out.counts.count(m) != 0) throw SchemaError(where + ": duplicate module " + m.name());
    auto counts = detail::field<std::vector<std::uint64_t>>(e, "counts", where);
    if (counts.empty()) throw SchemaError(where + ": empty counts");
    out.ledger.add_module(m, counts.size());
    out.ledger.set_counts(m, counts);
    if (e.contains("shape")) {
      const auto& s = e["shape"];
      out.shapes[m] = BankShape{detail::field<std::size_t>(s, "d_in", where), detail::field<std::size_t>(s, "d_out", where),
                                detail::field<std::size_t>(s, "rank", where), counts.size()};
    }
    std::vector<Snapshot> snaps;
    std::vector<ModuleMetrics> hist;
    if (e.contains("snapshots")) {
      for (const auto& s : e["snapshots"]) {
        snaps.push_back(Snapshot{detail::field<std::size_t>(s, "step", where),
                                 detail::field<std::vector<double>>(s, "distribution", where)});
      }
    }
    if (e.contains("history")) {
      for (const auto& h : e["history"]) {
        ModuleMetrics row;
        row.module = m;
        row.step = detail::field<std::size_t>(h, "step", where);
        row.empty = detail::field<bool>(h, "empty", where);
        row.gini = detail::field<double>(h, "gini", where);
        row.entropy = detail::opt_from_json(h.value("entropy", nlohmann::json()));
        row.drift = detail::opt_from_json(h.value("drift", nlohmann::json()));
        hist.push_back(row);
      }
    }
    out.ledger.restore_snapshots(m, std::move(snaps), std::move(hist));
    out.counts[m] = std::move(counts);
  }
  return out;
}

// ---- plan -----------------------------------------------------------------

inline ojson plan_to_json(const PruningPlan& plan, bool applied) {
  ojson j;
  j["schema"] = kPlanSchema;
  j["version"] = kSchemaVersion;
  j["applied"] = applied;
  j["step"] = plan.step;
  j["tau"] = plan.tau;
  j["k_min"] = plan.k_min;
  j["params_before"] = plan.params_before ? ojson(*plan.params_before) : ojson();
  j["params_after"] = plan.params_after ? ojson(*plan.params_after) : ojson();
  j["modules"] = ojson::array();
  for (const auto& mp : plan.modules) {
    ojson e;
    e["module"] = mp.module.name();
    e["layer"] = mp.module.layer;
    e["kind"] = std::string(to_string(mp.module.kind));
    e["n_before"] = mp.n_before;
    e["n_after"] = mp.survivors.size();
    e["survivors"] = mp.survivors;
    e["scores"] = mp.scores;
    e["threshold_branch"] = mp.threshold_branch;
    e["never_routed"] = mp.never_routed;
    e["params_before"] = mp.params_before ? ojson(*mp.params_before) : ojson();
    e["params_after"] = mp.params_after ? ojson(*mp.params_after) : ojson();
    j["modules"].push_back(std::move(e));
  }
  j["warnings"] = plan.warnings;
  return j;
}

struct PlanDump {
  PruningPlan plan;
  bool applied = false;
};

inline PlanDump plan_from_json(const nlohmann::json& j) {
  detail::check_schema(j, kPlanSchema);
  PlanDump out;
  out.applied = detail::field<bool>(j, "applied", "plan");
  PruningPlan& p = out.plan;
  p.step = detail::field<std::size_t>(j, "step", "plan");
  p.tau = detail::field<double>(j, "tau", "plan");
  p.k_min = detail::field<std::size_t>(j, "k_min", "plan");
  if (j.contains("params_before") && !j["params_before"].is_null()) p.params_before = j["params_before"].get<std::size_t>();
  if (j.contains("params_after") && !j["params_after"].is_null()) p.params_after = j["params_after"].get<std::size_t>();
  if (!j.contains("modules") || !j["modules"].is_array()) throw SchemaError("plan: 'modules' must be an array");
  std::size_t idx = 0;
  for (const auto& e : j["modules"]) {
    const std::string where = "plan module #" + std::to_string(idx++);
    ModulePlan mp;
    mp.module = detail::module_from_json(e, where);
    mp.n_before = detail::field<std::size_t>(e, "n_before", where);
    mp.survivors = detail::field<std::vector<std::size_t>>(e, "survivors", where);
    mp.scores = detail::field<std::vector<double>>(e, "scores", where);
    mp.threshold_branch = detail::field<bool>(e, "threshold_branch", where);
    mp.never_routed = detail::field<bool>(e, "never_routed", where);
    if (e.contains("params_before") && !e["params_before"].is_null()) mp.params_before = e["params_before"].get<std::size_t>();
    if (e.contains("params_after") && !e["params_after"].is_null()) mp.params_after = e["params_after"].get<std::size_t>();
    p.modules.push_back(std::move(mp));
  }
  if (j.contains("warnings")) p.warnings = j["warnings"].get<std::vector<std::string>>();
  return out;
}

// ---- model ----------------------------------------------------------------

inline ojson model_to_json(const Model& model, const OptimizerState& opt) {
  const BackboneConfig& c = model.backbone.config;
  ojson j;
  j["schema"] = kModelSchema;
  j["version"] = kSchemaVersion;
  j["backbone"] = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
                   {"n_heads", c.n_heads},       {"d_ff", c.d_ff},         {"seed", model.backbone.seed},
                   {"checksum", hex64(model.backbone.checksum())}};
  j["adapter_checksum"] = hex64(model.adapter_checksum());
  j["banks"] = ojson::array();
  for (const auto& [m, bank] : model.adapters) {
    ojson e;
    e["module"] = m.name();
    e["layer"] = m.layer;
    e["kind"] = std::string(to_string(m.kind));
    e["n_experts"] = bank.n_experts();
    e["rank"] = bank.rank;
    e["alpha"] = bank.alpha;
    e["d_in"] = bank.d_in;
    e["d_out"] = bank.d_out;
    e["checksum"] = hex64(bank.checksum());
    e["a_stack"] = std::vector<double>(bank.a_stack.data().begin(), bank.a_stack.data().end());
    e["b_stack"] = std::vector<double>(bank.b_stack.data().begin(), bank.b_stack.data().end());
    e["gate"] = std::vector<double>(bank.gate.data().begin(), bank.gate.data().end());
    j["banks"].push_back(std::move(e));
  }
  ojson o;
  o["step"] = opt.step;
  o["beta1"] = opt.hyper.beta1;
  o["beta2"] = opt.hyper.beta2;
  o["eps"] = opt.hyper.eps;
  o["weight_decay"] = opt.hyper.weight_decay;
  o["elements"] = state_element_count(opt);
  o["blocks"] = ojson::array();
  for (const auto& [id, mom] : opt.blocks) {
    o["blocks"].push_back({{"block", id.name()},
                           {"rows", mom.m.rows()},
                           {"cols", mom.m.cols()},
                           {"m", std::vector<double>(mom.m.data().begin(), mom.m.data().end())},
                           {"v", std::vector<double>(mom.v.data().begin(), mom.v.data().end())}});
  }
  j["optimizer"] = std::move(o);
  return j;
}

inline void write_json(const std::filesystem::path& p, const ojson& j) { write_text_file(p, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const std::filesystem::path& p) {
  const std::string text = read_text_file(p);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(p.string() + ": malformed JSON: " + e.what());
  }
}

}  // namespace dmep
