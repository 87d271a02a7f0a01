// SPDX-License-Identifier: Apache-2.0
//
// A small frozen pre-norm transformer. Every layer has seven linear
// projections (q/k/v/o attention, gate/up/down SwiGLU MLP), each of which
// carries an expert bank when adapters are supplied.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmep/autodiff.hpp"
#include "dmep/module_id.hpp"
#include "dmep/moe_adapter.hpp"
#include "dmep/routing_ledger.hpp"

namespace dmep {

struct BackboneConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 32;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0) {
      throw std::invalid_argument("BackboneConfig: dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw std::invalid_argument("BackboneConfig: d_model=" + std::to_string(d_model) +
                                  " not divisible by n_heads=" + std::to_string(n_heads));
    }
  }

  std::size_t module_count() const { return n_layers * kProjKindsPerLayer; }
};

struct ModuleDims {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
};

inline ModuleDims module_dims(const BackboneConfig& c, ProjKind kind) {
  switch (kind) {
    case ProjKind::Gate:
    case ProjKind::Up: return {c.d_model, c.d_ff};
    case ProjKind::Down: return {c.d_ff, c.d_model};
    default: return {c.d_model, c.d_model};
  }
}

inline std::vector<ModuleId> module_ids(const BackboneConfig& c) {
  std::vector<ModuleId> ids;
  ids.reserve(c.module_count());
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (ProjKind k : kAllProjKinds) ids.push_back(ModuleId{l, k});
  return ids;
}

struct Backbone {
  BackboneConfig config;
  std::uint64_t seed = 0;
  Matrix embedding;                  // vocab x d_model
  std::vector<Matrix> projections;   // [layer * 7 + kind], d_out x d_in
  std::vector<Matrix> attn_norm;     // per layer, 1 x d_model
  std::vector<Matrix> mlp_norm;      // per layer, 1 x d_model
  Matrix final_norm;                 // 1 x d_model
  Matrix head;                       // vocab x d_model

  const Matrix& weight(ModuleId m) const {
    if (m.layer >= config.n_layers) throw std::out_of_range("Backbone: layer out of range in " + m.name());
    return projections[m.layer * kProjKindsPerLayer + static_cast<std::size_t>(m.kind)];
  }

  ModuleDims dims(ModuleId m) const { return module_dims(config, m.kind); }

  std::uint64_t checksum() const {
    std::uint64_t h = dmep::checksum(embedding);
    for (const auto& w : projections) h = dmep::checksum(w, h);
    for (const auto& w : attn_norm) h = dmep::checksum(w, h);
    for (const auto& w : mlp_norm) h = dmep::checksum(w, h);
    h = dmep::checksum(final_norm, h);
    return dmep::checksum(head, h);
  }
};

inline Backbone init_backbone(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Backbone b;
  b.config = config;
  b.seed = seed;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0xB0u};
  std::mt19937_64 rng(seq);
  b.embedding = random_normal(config.vocab_size, config.d_model, stddev, rng);
  for (const ModuleId& m : module_ids(config)) {
    const ModuleDims d = module_dims(config, m.kind);
    b.projections.push_back(random_normal(d.d_out, d.d_in, stddev, rng));
  }
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    b.attn_norm.emplace_back(1, config.d_model, 1.0);
    b.mlp_norm.emplace_back(1, config.d_model, 1.0);
  }
  b.final_norm = Matrix(1, config.d_model, 1.0);
  b.head = random_normal(config.vocab_size, config.d_model, stddev, rng);
  return b;
}

using AdapterSet = std::map<ModuleId, ExpertBank>;

struct AdapterConfig {
  std::size_t n_experts = 8;
  std::size_t rank = 4;
  double alpha = 16.0;
};

inline AdapterSet init_adapters(const Backbone& backbone, const AdapterConfig& cfg, std::uint64_t seed) {
  AdapterSet set;
  for (const ModuleId& m : module_ids(backbone.config)) {
    const ModuleDims d = backbone.dims(m);
    set.emplace(m, init_expert_bank(m, d.d_in, d.d_out, cfg.rank, cfg.n_experts, cfg.alpha, seed));
  }
  return set;
}

// Equal-length token sequences, flattened batch-major.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> ids;

  static TokenBatch from_sequences(std::span<const std::vector<std::size_t>> seqs) {
    TokenBatch tb;
    if (seqs.empty()) throw std::invalid_argument("TokenBatch: no sequences");
    tb.batch = seqs.size();
    tb.seq_len = seqs.front().size();
    if (tb.seq_len == 0) throw std::invalid_argument("TokenBatch: empty sequence");
    tb.ids.reserve(tb.batch * tb.seq_len);
    for (const auto& s : seqs) {
      if (s.size() != tb.seq_len) throw std::invalid_argument("TokenBatch: sequences differ in length");
      tb.ids.insert(tb.ids.end(), s.begin(), s.end());
    }
    return tb;
  }

  std::size_t tokens() const noexcept { return ids.size(); }

  // Row index of the last position of every sequence.
  std::vector<std::size_t> last_positions() const {
    std::vector<std::size_t> rows(batch);
    for (std::size_t b = 0; b < batch; ++b) rows[b] = b * seq_len + seq_len - 1;
    return rows;
  }
};

struct ForwardOptions {
  std::size_t k = 2;
  RoutingLedger* ledger = nullptr;
  // Per-module expert keep-masks; absent modules route over all experts.
  const std::map<ModuleId, std::vector<bool>>* expert_masks = nullptr;
  bool trainable_adapters = true;
};

struct ModuleRouting {
  ad::Var probs;
  RoutingDecision decision;
};

struct TapeForward {
  ad::Var logits;  // (batch * seq_len) x vocab
  std::map<ModuleId, ModuleRouting> routing;
  std::map<ModuleId, BankVars> params;
};

// Null `adapters` runs the frozen backbone alone.
inline TapeForward forward_on_tape(ad::Tape& tape, const Backbone& bb, const AdapterSet* adapters,
                                   const TokenBatch& tokens, const ForwardOptions& opt = {}) {
  const BackboneConfig& c = bb.config;
  if (tokens.tokens() == 0) throw std::invalid_argument("forward: empty batch");
  for (std::size_t id : tokens.ids) {
    if (id >= c.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(id) + " >= vocab_size " +
                              std::to_string(c.vocab_size));
    }
  }
  TapeForward out;
  if (adapters != nullptr) {
    for (const ModuleId& m : module_ids(c)) {
      auto it = adapters->find(m);
      if (it == adapters->end()) throw std::invalid_argument("forward: no adapter for targeted module " + m.name());
      out.params.emplace(m, place_on_tape(tape, it->second, opt.trainable_adapters));
    }
  }

  auto project = [&](ModuleId m, ad::Var x) {
    ad::Var y = ad::matmul_nt(x, tape.constant(bb.weight(m)));
    if (adapters == nullptr) return y;
    const ExpertBank& bank = adapters->at(m);
    const std::vector<bool>* keep = nullptr;
    if (opt.expert_masks != nullptr) {
      auto mk = opt.expert_masks->find(m);
      if (mk != opt.expert_masks->end()) keep = &mk->second;
    }
    RoutedDelta rd = routed_delta(bank, out.params.at(m), x, opt.k, keep);
    if (opt.ledger != nullptr) opt.ledger->record(m, rd.decision.selected);
    out.routing.emplace(m, ModuleRouting{rd.probs, std::move(rd.decision)});
    return ad::add(y, rd.delta);
  };

  ad::Var x = ad::gather_rows(tape.constant(bb.embedding), tokens.ids);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    ad::Var n1 = ad::rmsnorm(x, bb.attn_norm[l]);
    ad::Var q = project({l, ProjKind::Q}, n1);
    ad::Var k = project({l, ProjKind::K}, n1);
    ad::Var v = project({l, ProjKind::V}, n1);
    ad::Var att = ad::causal_attention(q, k, v, tokens.batch, tokens.seq_len, c.n_heads);
    x = ad::add(x, project({l, ProjKind::O}, att));
    ad::Var n2 = ad::rmsnorm(x, bb.mlp_norm[l]);
    ad::Var g = project({l, ProjKind::Gate}, n2);
    ad::Var u = project({l, ProjKind::Up}, n2);
    ad::Var h = ad::mul(ad::silu(g), u);
    x = ad::add(x, project({l, ProjKind::Down}, h));
  }
  ad::Var nf = ad::rmsnorm(x, bb.final_norm);
  out.logits = ad::matmul_nt(nf, tape.constant(bb.head));
  return out;
}

inline Matrix forward(const Backbone& bb, const AdapterSet& adapters, const TokenBatch& tokens, std::size_t k,
                      RoutingLedger* ledger = nullptr) {
  ad::Tape tape;
  ForwardOptions opt;
  opt.k = k;
  opt.ledger = ledger;
  opt.trainable_adapters = false;
  return forward_on_tape(tape, bb, &adapters, tokens, opt).logits.value();
}

inline Matrix forward_frozen(const Backbone& bb, const TokenBatch& tokens) {
  ad::Tape tape;
  return forward_on_tape(tape, bb, nullptr, tokens).logits.value();
}

}  // namespace dmep
