// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay. State is kept per parameter block and
// mirrors the block's shape, so structural edits to a block can be applied
// to its moments row for row.

#pragma once

#include <cmath>
#include <compare>
#include <map>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmep/backbone.hpp"
#include "dmep/numerics.hpp"

namespace dmep {

enum class StackPart : std::uint8_t { A, B, Gate };

inline constexpr std::string_view to_string(StackPart p) {
  switch (p) {
    case StackPart::A: return "a_stack";
    case StackPart::B: return "b_stack";
    case StackPart::Gate: return "gate";
  }
  return "?";
}

struct BlockId {
  ModuleId module;
  StackPart part = StackPart::A;
  friend auto operator<=>(const BlockId&, const BlockId&) = default;
  std::string name() const { return module.name() + "." + std::string(to_string(part)); }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct Moments {
  Matrix m;
  Matrix v;
};

struct OptimizerState {
  AdamWConfig hyper;
  std::size_t step = 0;
  std::map<BlockId, Moments> blocks;

  void add_block(BlockId id, std::size_t rows, std::size_t cols) {
    blocks[id] = Moments{Matrix(rows, cols), Matrix(rows, cols)};
  }

  const Moments& at(BlockId id) const {
    auto it = blocks.find(id);
    if (it == blocks.end()) throw std::out_of_range("OptimizerState: unknown block " + id.name());
    return it->second;
  }
};

inline std::size_t state_element_count(const OptimizerState& s) {
  std::size_t n = 0;
  for (const auto& [_, mom] : s.blocks) n += mom.m.size() + mom.v.size();
  return n;
}

inline Matrix& block_of(ExpertBank& bank, StackPart p) {
  switch (p) {
    case StackPart::A: return bank.a_stack;
    case StackPart::B: return bank.b_stack;
    case StackPart::Gate: return bank.gate;
  }
  throw std::logic_error("block_of: bad part");
}

inline const Matrix& block_of(const ExpertBank& bank, StackPart p) {
  return block_of(const_cast<ExpertBank&>(bank), p);
}

inline constexpr std::array<StackPart, 3> kStackParts = {StackPart::A, StackPart::B, StackPart::Gate};

inline OptimizerState init_optimizer(const AdapterSet& adapters, const AdamWConfig& hyper) {
  OptimizerState s;
  s.hyper = hyper;
  for (const auto& [m, bank] : adapters) {
    for (StackPart p : kStackParts) {
      const Matrix& blk = block_of(bank, p);
      s.add_block(BlockId{m, p}, blk.rows(), blk.cols());
    }
  }
  return s;
}

struct ParamGrad {
  BlockId id;
  Matrix* param = nullptr;
  const Matrix* grad = nullptr;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One AdamW update over every listed block; the step counter advances once.
inline void adamw_step(std::span<const ParamGrad> items, OptimizerState& state, double lr) {
  if (lr < 0.0) throw std::invalid_argument("adamw_step: negative learning rate");
  for (const ParamGrad& it : items) {
    require_same_shape(*it.param, *it.grad, "adamw_step");
    const Moments& mom = state.at(it.id);
    if (!mom.m.same_shape(*it.param)) {
      throw ShapeError("adamw_step: state for " + it.id.name() + " is " + mom.m.shape_string() + ", parameter is " +
                       it.param->shape_string());
    }
    for (double g : it.grad->data()) {
      if (!std::isfinite(g)) throw NonFiniteGradient("adamw_step: non-finite gradient in " + it.id.name());
    }
  }
  const AdamWConfig& h = state.hyper;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  for (const ParamGrad& it : items) {
    Moments& mom = state.blocks.at(it.id);
    auto p = it.param->data();
    auto g = it.grad->data();
    auto m = mom.m.data();
    auto v = mom.v.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= lr * (m_hat / (std::sqrt(v_hat) + h.eps) + h.weight_decay * p[i]);
    }
  }
}

// Linear warm-up to peak over warmup_frac * total_steps, then cosine to 0.
inline double schedule_lr(std::size_t step, std::size_t total_steps, double peak_lr, double warmup_frac) {
  if (total_steps == 0) return 0.0;
  if (step > total_steps) throw std::invalid_argument("schedule_lr: step beyond total");
  const double total = static_cast<double>(total_steps);
  const double warm = warmup_frac * total;
  const double s = static_cast<double>(step);
  if (s < warm) return peak_lr * s / warm;
  if (total <= warm) return peak_lr;
  const double progress = (s - warm) / (total - warm);
  return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace dmep
