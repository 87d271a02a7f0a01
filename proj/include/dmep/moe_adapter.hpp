// SPDX-License-Identifier: Apache-2.0
//
// LoRA expert banks with softmax top-k routing.
//
// A bank keeps its experts stacked: row i of `a_stack` is A_i (rank x d_in,
// row-major) and row i of `b_stack` is B_i (d_out x rank, row-major). Row i of
// `gate` produces expert i's routing logit. Removing an expert is therefore a
// row selection on all three matrices.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmep/autodiff.hpp"
#include "dmep/module_id.hpp"
#include "dmep/numerics.hpp"

namespace dmep {

struct ExpertBank {
  ModuleId module;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t rank = 0;
  double alpha = 1.0;
  Matrix a_stack;  // N x (rank * d_in)
  Matrix b_stack;  // N x (d_out * rank)
  Matrix gate;     // N x d_in

  std::size_t n_experts() const noexcept { return gate.rows(); }
  double scaling() const noexcept { return alpha / static_cast<double>(rank); }

  Matrix expert_a(std::size_t i) const {
    auto r = a_stack.row(i);
    return Matrix(rank, d_in, std::vector<double>(r.begin(), r.end()));
  }
  Matrix expert_b(std::size_t i) const {
    auto r = b_stack.row(i);
    return Matrix(d_out, rank, std::vector<double>(r.begin(), r.end()));
  }

  std::uint64_t checksum() const {
    std::uint64_t h = dmep::checksum(a_stack);
    h = dmep::checksum(b_stack, h);
    return dmep::checksum(gate, h);
  }

  void validate() const {
    const std::size_t n = gate.rows();
    if (n == 0) throw std::invalid_argument(module.name() + ": bank has no experts");
    if (gate.cols() != d_in || a_stack.rows() != n || a_stack.cols() != rank * d_in ||
        b_stack.rows() != n || b_stack.cols() != d_out * rank) {
      throw ShapeError(module.name() + ": inconsistent bank shapes");
    }
  }
};

// Parameters held by an N-expert bank: the two LoRA stacks plus one gate row per expert.
inline constexpr std::size_t bank_param_count(std::size_t d_in, std::size_t d_out, std::size_t rank,
                                              std::size_t n_experts) {
  return n_experts * (rank * (d_in + d_out)) + n_experts * d_in;
}

inline std::size_t trainable_param_count(const ExpertBank& bank) {
  return bank_param_count(bank.d_in, bank.d_out, bank.rank, bank.n_experts());
}

inline ExpertBank init_expert_bank(ModuleId module, std::size_t d_in, std::size_t d_out, std::size_t rank,
                                   std::size_t n_experts, double alpha, std::uint64_t seed) {
  if (d_in == 0 || d_out == 0 || rank == 0 || n_experts == 0) {
    throw std::invalid_argument("init_expert_bank: dimensions must be positive");
  }
  if (rank > std::min(d_in, d_out)) {
    throw std::invalid_argument("init_expert_bank: rank " + std::to_string(rank) + " exceeds min(d_in, d_out)");
  }
  if (!(alpha > 0.0)) throw std::invalid_argument("init_expert_bank: alpha must be positive");
  ExpertBank bank;
  bank.module = module;
  bank.d_in = d_in;
  bank.d_out = d_out;
  bank.rank = rank;
  bank.alpha = alpha;
  const double std_in = 1.0 / std::sqrt(static_cast<double>(d_in));
  auto rng_a = module_rng(seed, module, 11);
  auto rng_g = module_rng(seed, module, 13);
  bank.a_stack = random_normal(n_experts, rank * d_in, std_in, rng_a);
  bank.b_stack = Matrix(n_experts, d_out * rank);
  bank.gate = random_normal(n_experts, d_in, std_in, rng_g);
  return bank;
}

struct RoutingDecision {
  Matrix probs;                                 // tokens x N, full softmax
  std::vector<std::vector<std::size_t>> selected;  // per token, ascending
  std::size_t k = 0;

  std::size_t tokens() const noexcept { return probs.rows(); }
  std::size_t n_experts() const noexcept { return probs.cols(); }
};

// Expert i's share of the batch's assignments; sums to 1 over experts.
inline std::vector<double> assignment_fractions(const RoutingDecision& d) {
  std::vector<double> f(d.n_experts(), 0.0);
  for (const auto& sel : d.selected)
    for (std::size_t i : sel) f[i] += 1.0;
  const double denom = static_cast<double>(d.tokens() * d.k);
  for (double& v : f) v /= denom;
  return f;
}

namespace detail {
inline void check_k(std::size_t k, std::size_t n, const ModuleId& m) {
  if (k == 0 || k > n) {
    throw std::invalid_argument(m.name() + ": top-k " + std::to_string(k) + " with only " + std::to_string(n) +
                                " experts");
  }
}

inline std::vector<std::vector<std::size_t>> select_topk(const Matrix& probs, std::size_t k) {
  std::vector<std::vector<std::size_t>> sel;
  sel.reserve(probs.rows());
  for (std::size_t t = 0; t < probs.rows(); ++t) sel.push_back(topk_indices(probs.row(t), k));
  return sel;
}
}  // namespace detail

// `keep`, when given, removes experts from the softmax by forcing their
// logits to -inf.
inline RoutingDecision route(const ExpertBank& bank, const Matrix& x, std::size_t k,
                             const std::vector<bool>* keep = nullptr) {
  if (x.cols() != bank.d_in) {
    throw ShapeError(bank.module.name() + ": route input " + x.shape_string() + " but d_in=" +
                     std::to_string(bank.d_in));
  }
  detail::check_k(k, bank.n_experts(), bank.module);
  Matrix logits = kernels::matmul_nt(x, bank.gate);
  if (keep != nullptr) {
    std::size_t kept = 0;
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      if ((*keep)[c]) {
        ++kept;
        continue;
      }
      for (std::size_t r = 0; r < logits.rows(); ++r) logits(r, c) = -std::numeric_limits<double>::infinity();
    }
    detail::check_k(k, kept, bank.module);
  }
  RoutingDecision d;
  d.probs = kernels::softmax_rows(logits);
  d.selected = detail::select_topk(d.probs, k);
  d.k = k;
  return d;
}

// Per token: scaling * sum over selected i of probs[i] * B_i A_i x.
inline Matrix adapter_forward(const ExpertBank& bank, const Matrix& x, const RoutingDecision& decision) {
  if (x.cols() != bank.d_in) throw ShapeError(bank.module.name() + ": adapter input " + x.shape_string());
  if (decision.tokens() != x.rows() || decision.n_experts() != bank.n_experts()) {
    throw ShapeError(bank.module.name() + ": routing decision " + decision.probs.shape_string() +
                     " does not match input/bank");
  }
  const std::size_t r = bank.rank;
  const double s = bank.scaling();
  Matrix out(x.rows(), bank.d_out);
  std::vector<double> u(r);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto xt = x.row(t);
    auto ot = out.row(t);
    for (std::size_t i : decision.selected[t]) {
      const double* a = bank.a_stack.row(i).data();
      const double* b = bank.b_stack.row(i).data();
      for (std::size_t q = 0; q < r; ++q) {
        double acc = 0.0;
        for (std::size_t c = 0; c < bank.d_in; ++c) acc += a[q * bank.d_in + c] * xt[c];
        u[q] = acc;
      }
      const double w = s * decision.probs(t, i);
      for (std::size_t o = 0; o < bank.d_out; ++o) {
        double acc = 0.0;
        for (std::size_t q = 0; q < r; ++q) acc += b[o * r + q] * u[q];
        ot[o] += w * acc;
      }
    }
  }
  return out;
}

// N * sum_i f_i * P_i over the concatenated tokens of one module's decisions.
inline double aux_loss(std::span<const RoutingDecision> decisions) {
  if (decisions.empty()) throw std::invalid_argument("aux_loss: empty batch");
  const std::size_t n = decisions.front().n_experts();
  const std::size_t k = decisions.front().k;
  std::vector<double> counts(n, 0.0), prob_sum(n, 0.0);
  std::size_t tokens = 0;
  for (const auto& d : decisions) {
    if (d.n_experts() != n || d.k != k) throw std::invalid_argument("aux_loss: decisions disagree on N or k");
    tokens += d.tokens();
    for (std::size_t t = 0; t < d.tokens(); ++t) {
      for (std::size_t i : d.selected[t]) counts[i] += 1.0;
      for (std::size_t i = 0; i < n; ++i) prob_sum[i] += d.probs(t, i);
    }
  }
  if (tokens == 0) throw std::invalid_argument("aux_loss: empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double f = counts[i] / static_cast<double>(tokens * k);
    const double p = prob_sum[i] / static_cast<double>(tokens);
    acc += f * p;
  }
  return static_cast<double>(n) * acc;
}

inline double aux_loss(const RoutingDecision& d) { return aux_loss(std::span<const RoutingDecision>(&d, 1)); }

// Differentiable pieces ----------------------------------------------------

namespace ad {

// Weighted sum of the selected experts' low-rank deltas. Gradients reach x,
// the selected probability entries, and the selected rows of both stacks.
inline Var moe_combine(Var x, Var probs, Var a_stack, Var b_stack,
                       std::vector<std::vector<std::size_t>> selected, std::size_t rank, double scaling) {
  const Matrix& xv = x.value();
  const std::size_t d_in = xv.cols();
  const std::size_t n = a_stack.value().rows();
  if (a_stack.value().cols() != rank * d_in || b_stack.value().rows() != n || probs.value().cols() != n ||
      probs.value().rows() != xv.rows() || selected.size() != xv.rows() ||
      b_stack.value().cols() % rank != 0) {
    throw ShapeError("moe_combine: inconsistent operand shapes");
  }
  const std::size_t d_out = b_stack.value().cols() / rank;
  const NodeId ix = x.id(), ip = probs.id(), ia = a_stack.id(), ib = b_stack.id();
  auto sel = std::make_shared<const std::vector<std::vector<std::size_t>>>(std::move(selected));

  auto lowrank = [rank, d_in](const double* a, std::span<const double> xt, std::vector<double>& u) {
    for (std::size_t q = 0; q < rank; ++q) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d_in; ++c) acc += a[q * d_in + c] * xt[c];
      u[q] = acc;
    }
  };

  return x.tape().record(
      "moe_combine", {ix, ip, ia, ib},
      [=](const Tape& t) {
        const Matrix& X = t.value(ix);
        const Matrix& P = t.value(ip);
        const Matrix& A = t.value(ia);
        const Matrix& B = t.value(ib);
        Matrix out(X.rows(), d_out);
        std::vector<double> u(rank);
        for (std::size_t tok = 0; tok < X.rows(); ++tok) {
          auto ot = out.row(tok);
          for (std::size_t i : (*sel)[tok]) {
            lowrank(A.row(i).data(), X.row(tok), u);
            const double* b = B.row(i).data();
            const double w = scaling * P(tok, i);
            for (std::size_t o = 0; o < d_out; ++o) {
              double acc = 0.0;
              for (std::size_t q = 0; q < rank; ++q) acc += b[o * rank + q] * u[q];
              ot[o] += w * acc;
            }
          }
        }
        return out;
      },
      [=](Tape& t, const Matrix& g) {
        const Matrix& X = t.value(ix);
        const Matrix& P = t.value(ip);
        const Matrix& A = t.value(ia);
        const Matrix& B = t.value(ib);
        Matrix dx(X.rows(), d_in), dp(P.rows(), P.cols()), da(A.rows(), A.cols()), db(B.rows(), B.cols());
        std::vector<double> u(rank), du(rank);
        for (std::size_t tok = 0; tok < X.rows(); ++tok) {
          auto xt = X.row(tok);
          auto gt = g.row(tok);
          for (std::size_t i : (*sel)[tok]) {
            lowrank(A.row(i).data(), xt, u);
            const double* b = B.row(i).data();
            const double w = scaling * P(tok, i);
            // g . (B u) feeds the probability; B^T g feeds u.
            double gv = 0.0;
            std::fill(du.begin(), du.end(), 0.0);
            double* dbi = db.row(i).data();
            for (std::size_t o = 0; o < d_out; ++o) {
              double bu = 0.0;
              for (std::size_t q = 0; q < rank; ++q) {
                bu += b[o * rank + q] * u[q];
                du[q] += b[o * rank + q] * gt[o];
                dbi[o * rank + q] += w * gt[o] * u[q];
              }
              gv += gt[o] * bu;
            }
            dp(tok, i) += scaling * gv;
            const double* a = A.row(i).data();
            double* dai = da.row(i).data();
            auto dxt = dx.row(tok);
            for (std::size_t q = 0; q < rank; ++q) {
              const double dq = w * du[q];
              for (std::size_t c = 0; c < d_in; ++c) {
                dai[q * d_in + c] += dq * xt[c];
                dxt[c] += dq * a[q * d_in + c];
              }
            }
          }
        }
        t.accumulate(ix, std::move(dx));
        t.accumulate(ip, std::move(dp));
        t.accumulate(ia, std::move(da));
        t.accumulate(ib, std::move(db));
      });
}

// N * sum_i f_i * mean_t probs[t, i] with f held constant.
inline Var load_balance_loss(Var probs, std::vector<double> fractions) {
  const Matrix& pv = probs.value();
  if (fractions.size() != pv.cols()) throw ShapeError("load_balance_loss: fraction length mismatch");
  if (pv.rows() == 0) throw std::invalid_argument("load_balance_loss: empty batch");
  const NodeId ip = probs.id();
  auto f = std::make_shared<const std::vector<double>>(std::move(fractions));
  return probs.tape().record(
      "load_balance_loss", {ip},
      [ip, f](const Tape& t) {
        const Matrix& P = t.value(ip);
        std::vector<double> col(P.cols(), 0.0);
        for (std::size_t r = 0; r < P.rows(); ++r)
          for (std::size_t c = 0; c < P.cols(); ++c) col[c] += P(r, c);
        double acc = 0.0;
        for (std::size_t c = 0; c < P.cols(); ++c) acc += (*f)[c] * (col[c] / static_cast<double>(P.rows()));
        return Matrix::scalar(static_cast<double>(P.cols()) * acc);
      },
      [ip, f](Tape& t, const Matrix& g) {
        const Matrix& P = t.value(ip);
        Matrix out(P.rows(), P.cols());
        const double n = static_cast<double>(P.cols());
        const double tokens = static_cast<double>(P.rows());
        for (std::size_t r = 0; r < P.rows(); ++r)
          for (std::size_t c = 0; c < P.cols(); ++c) out(r, c) = g.item() * n * (*f)[c] / tokens;
        t.accumulate(ip, std::move(out));
      });
}

}  // namespace ad

// One bank's parameters placed on a tape.
struct BankVars {
  ad::Var a_stack;
  ad::Var b_stack;
  ad::Var gate;
};

inline BankVars place_on_tape(ad::Tape& tape, const ExpertBank& bank, bool trainable) {
  return BankVars{tape.leaf(bank.a_stack, trainable), tape.leaf(bank.b_stack, trainable),
                  tape.leaf(bank.gate, trainable)};
}

struct RoutedDelta {
  ad::Var delta;  // tokens x d_out
  ad::Var probs;  // tokens x N
  RoutingDecision decision;
};

// Routing plus adapter delta on the tape. The top-k choice is read off the
// probability values and treated as constant.
inline RoutedDelta routed_delta(const ExpertBank& bank, const BankVars& vars, ad::Var x, std::size_t k,
                                const std::vector<bool>* keep = nullptr) {
  if (x.value().cols() != bank.d_in) {
    throw ShapeError(bank.module.name() + ": adapter input " + x.value().shape_string() + " but d_in=" +
                     std::to_string(bank.d_in));
  }
  detail::check_k(k, bank.n_experts(), bank.module);
  ad::Var logits = ad::matmul_nt(x, vars.gate);
  if (keep != nullptr) {
    if (static_cast<std::size_t>(std::count(keep->begin(), keep->end(), true)) < k) {
      detail::check_k(k, static_cast<std::size_t>(std::count(keep->begin(), keep->end(), true)), bank.module);
    }
    logits = ad::mask_columns(logits, *keep);
  }
  ad::Var probs = ad::softmax_rows(logits);
  RoutedDelta out;
  out.decision.probs = probs.value();
  out.decision.selected = detail::select_topk(out.decision.probs, k);
  out.decision.k = k;
  out.probs = probs;
  out.delta = ad::moe_combine(x, probs, vars.a_stack, vars.b_stack, out.decision.selected, bank.rank,
                              bank.scaling());
  return out;
}

}  // namespace dmep
