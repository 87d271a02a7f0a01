// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over dmep::Matrix.
//
// Every op records its inputs, a forward closure that recomputes its value
// from the tape, and a backward closure that pushes the output gradient into
// its inputs. Entries are appended in evaluation order, so the tape is
// topologically sorted by construction and backward is a single reverse sweep.

#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dmep/numerics.hpp"

namespace dmep::ad {

struct NodeId {
  std::uint32_t index = 0;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  NodeId id() const noexcept { return id_; }
  Tape& tape() const noexcept { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  NodeId id_{};
};

using GradientMap = std::map<NodeId, Matrix>;

class Tape {
 public:
  using Forward = std::function<Matrix(const Tape&)>;
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  struct Entry {
    std::string op;
    std::vector<NodeId> inputs;
    NodeId output;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool trainable) {
    Node n;
    n.op = trainable ? "param" : "const";
    n.value = std::move(value);
    n.requires_grad = trainable;
    n.is_leaf = true;
    n.trainable = trainable;
    nodes_.push_back(std::move(n));
    return Var(this, NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)});
  }

  Var constant(Matrix value) { return leaf(std::move(value), false); }

  Var record(std::string_view op, std::vector<NodeId> inputs, Forward forward, Backward backward) {
    Node n;
    n.op = std::string(op);
    n.value = forward(*this);
    for (NodeId in : inputs) n.requires_grad = n.requires_grad || nodes_.at(in.index).requires_grad;
    n.inputs = std::move(inputs);
    n.forward = std::move(forward);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)});
  }

  const Matrix& value(NodeId id) const { return nodes_.at(id.index).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id.index).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Entry entry(std::size_t i) const {
    const Node& n = nodes_.at(i);
    return Entry{n.op, n.inputs, NodeId{static_cast<std::uint32_t>(i)}};
  }

  // Adds g into the gradient slot of id. No-op for nodes outside the
  // differentiable subgraph.
  void accumulate(NodeId id, const Matrix& g) {
    Node& n = nodes_.at(id.index);
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      require_same_shape(n.value, g, "accumulate");
      n.grad = g;
    } else {
      kernels::add_inplace(n.grad, g);
    }
  }

  void accumulate(NodeId id, Matrix&& g) {
    Node& n = nodes_.at(id.index);
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      require_same_shape(n.value, g, "accumulate");
      n.grad = std::move(g);
    } else {
      kernels::add_inplace(n.grad, g);
    }
  }

  // Gradients of a 1x1 loss with respect to every trainable leaf. Leaves the
  // loss does not reach get an explicit zero matrix.
  GradientMap backward(Var loss) {
    if (loss.id().index >= nodes_.size()) throw std::invalid_argument("backward: unknown loss node");
    const Matrix& lv = value(loss.id());
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ShapeError("backward: loss must be 1x1, got " + lv.shape_string());
    }
    for (Node& n : nodes_) n.grad = Matrix();
    accumulate(loss.id(), Matrix::scalar(1.0));
    for (std::size_t i = loss.id().index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.is_leaf || n.grad.empty() || !n.backward) continue;
      const Matrix g = std::move(n.grad);
      n.grad = Matrix();
      n.backward(*this, g);
    }
    GradientMap out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (!n.trainable) continue;
      out.emplace(NodeId{static_cast<std::uint32_t>(i)},
                  n.grad.empty() ? Matrix(n.value.rows(), n.value.cols()) : n.grad);
    }
    return out;
  }

  // Recomputes every non-leaf value from the current leaves, in tape order.
  void replay() {
    for (Node& n : nodes_) {
      if (!n.is_leaf) n.value = n.forward(*this);
    }
  }

  void set_leaf(NodeId id, Matrix value) {
    Node& n = nodes_.at(id.index);
    if (!n.is_leaf) throw std::invalid_argument("set_leaf: node is not a leaf");
    require_same_shape(n.value, value, "set_leaf");
    n.value = std::move(value);
  }

 private:
  struct Node {
    std::string op;
    std::vector<NodeId> inputs;
    Matrix value;
    Matrix grad;
    Forward forward;
    Backward backward;
    bool requires_grad = false;
    bool is_leaf = false;
    bool trainable = false;
  };

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

namespace detail {
inline void same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b, "matmul");
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(
      "matmul", {ia, ib},
      [ia, ib](const Tape& t) { return kernels::matmul(t.value(ia), t.value(ib)); },
      [ia, ib](Tape& t, const Matrix& g) {
        if (t.requires_grad(ia)) t.accumulate(ia, kernels::matmul_nt(g, t.value(ib)));
        if (t.requires_grad(ib)) t.accumulate(ib, kernels::matmul_tn(t.value(ia), g));
      });
}

// a · bᵀ; the natural form for y = x Wᵀ with W stored out×in.
inline Var matmul_nt(Var a, Var b) {
  detail::same_tape(a, b, "matmul_nt");
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(
      "matmul_nt", {ia, ib},
      [ia, ib](const Tape& t) { return kernels::matmul_nt(t.value(ia), t.value(ib)); },
      [ia, ib](Tape& t, const Matrix& g) {
        if (t.requires_grad(ia)) t.accumulate(ia, kernels::matmul(g, t.value(ib)));
        if (t.requires_grad(ib)) t.accumulate(ib, kernels::matmul_tn(g, t.value(ia)));
      });
}

inline Var add(Var a, Var b) {
  detail::same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(
      "add", {ia, ib},
      [ia, ib](const Tape& t) {
        Matrix out = t.value(ia);
        kernels::add_inplace(out, t.value(ib));
        return out;
      },
      [ia, ib](Tape& t, const Matrix& g) {
        t.accumulate(ia, g);
        t.accumulate(ib, g);
      });
}

inline Var mul(Var a, Var b) {
  detail::same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  const NodeId ia = a.id(), ib = b.id();
  return a.tape().record(
      "mul", {ia, ib},
      [ia, ib](const Tape& t) {
        Matrix out = t.value(ia);
        auto o = out.data();
        auto s = t.value(ib).data();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] *= s[i];
        return out;
      },
      [ia, ib](Tape& t, const Matrix& g) {
        auto grad_for = [&g](const Matrix& other) {
          Matrix out = g;
          auto o = out.data();
          auto s = other.data();
          for (std::size_t i = 0; i < o.size(); ++i) o[i] *= s[i];
          return out;
        };
        if (t.requires_grad(ia)) t.accumulate(ia, grad_for(t.value(ib)));
        if (t.requires_grad(ib)) t.accumulate(ib, grad_for(t.value(ia)));
      });
}

inline Var scale(Var a, double s) {
  const NodeId ia = a.id();
  return a.tape().record(
      "scale", {ia},
      [ia, s](const Tape& t) {
        Matrix out = t.value(ia);
        for (double& v : out.data()) v *= s;
        return out;
      },
      [ia, s](Tape& t, const Matrix& g) {
        Matrix out = g;
        for (double& v : out.data()) v *= s;
        t.accumulate(ia, std::move(out));
      });
}

// Sum of all elements as a 1x1.
inline Var sum(Var a) {
  const NodeId ia = a.id();
  return a.tape().record(
      "sum", {ia},
      [ia](const Tape& t) {
        const auto d = t.value(ia).data();
        return Matrix::scalar(std::accumulate(d.begin(), d.end(), 0.0));
      },
      [ia](Tape& t, const Matrix& g) {
        const Matrix& x = t.value(ia);
        t.accumulate(ia, Matrix(x.rows(), x.cols(), g.item()));
      });
}

inline Var silu(Var a) {
  const NodeId ia = a.id();
  return a.tape().record(
      "silu", {ia},
      [ia](const Tape& t) {
        Matrix out = t.value(ia);
        for (double& v : out.data()) v = kernels::silu(v);
        return out;
      },
      [ia](Tape& t, const Matrix& g) {
        const Matrix& x = t.value(ia);
        Matrix out(x.rows(), x.cols());
        auto o = out.data();
        auto xs = x.data();
        auto gs = g.data();
        for (std::size_t i = 0; i < o.size(); ++i) {
          const double sig = 1.0 / (1.0 + std::exp(-xs[i]));
          o[i] = gs[i] * sig * (1.0 + xs[i] * (1.0 - sig));
        }
        t.accumulate(ia, std::move(out));
      });
}

// Row-wise RMS normalization with a constant 1 x d scale.
inline Var rmsnorm(Var x, Matrix weight) {
  const NodeId ix = x.id();
  auto w = std::make_shared<const Matrix>(std::move(weight));
  return x.tape().record(
      "rmsnorm", {ix},
      [ix, w](const Tape& t) { return kernels::rmsnorm_rows(t.value(ix), *w); },
      [ix, w](Tape& t, const Matrix& g) {
        const Matrix& xv = t.value(ix);
        const std::size_t d = xv.cols();
        const double dd = static_cast<double>(d);
        Matrix out(xv.rows(), d);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          auto xr = xv.row(r);
          auto gr = g.row(r);
          double ms = 0.0;
          for (double v : xr) ms += v * v;
          const double inv = 1.0 / std::sqrt(ms / dd + kernels::kRmsNormEps);
          double dot = 0.0;
          for (std::size_t c = 0; c < d; ++c) dot += gr[c] * (*w)(0, c) * xr[c];
          auto o = out.row(r);
          for (std::size_t c = 0; c < d; ++c) {
            o[c] = inv * gr[c] * (*w)(0, c) - inv * inv * inv * xr[c] * dot / dd;
          }
        }
        t.accumulate(ix, std::move(out));
      });
}

inline Var softmax_rows(Var a) {
  const NodeId ia = a.id();
  return a.tape().record(
      "softmax_rows", {ia},
      [ia](const Tape& t) { return kernels::softmax_rows(t.value(ia)); },
      [ia](Tape& t, const Matrix& g) {
        // p is this node's output; recompute rather than look it up by id.
        const Matrix p = kernels::softmax_rows(t.value(ia));
        Matrix out(p.rows(), p.cols());
        for (std::size_t r = 0; r < p.rows(); ++r) {
          auto pr = p.row(r);
          auto gr = g.row(r);
          double dot = 0.0;
          for (std::size_t c = 0; c < p.cols(); ++c) {
            if (pr[c] != 0.0) dot += pr[c] * gr[c];
          }
          auto o = out.row(r);
          for (std::size_t c = 0; c < p.cols(); ++c) o[c] = pr[c] == 0.0 ? 0.0 : pr[c] * (gr[c] - dot);
        }
        t.accumulate(ia, std::move(out));
      });
}

// Columns where keep[c] is false become -inf, so a following softmax assigns
// them zero mass.
inline Var mask_columns(Var a, std::vector<bool> keep) {
  if (keep.size() != a.value().cols()) {
    throw ShapeError("mask_columns: mask length " + std::to_string(keep.size()) +
                     " vs input " + a.value().shape_string());
  }
  if (std::none_of(keep.begin(), keep.end(), [](bool b) { return b; })) {
    throw std::invalid_argument("mask_columns: every column masked");
  }
  const NodeId ia = a.id();
  auto mask = std::make_shared<const std::vector<bool>>(std::move(keep));
  return a.tape().record(
      "mask_columns", {ia},
      [ia, mask](const Tape& t) {
        Matrix out = t.value(ia);
        for (std::size_t r = 0; r < out.rows(); ++r)
          for (std::size_t c = 0; c < out.cols(); ++c)
            if (!(*mask)[c]) out(r, c) = -std::numeric_limits<double>::infinity();
        return out;
      },
      [ia, mask](Tape& t, const Matrix& g) {
        Matrix out = g;
        for (std::size_t r = 0; r < out.rows(); ++r)
          for (std::size_t c = 0; c < out.cols(); ++c)
            if (!(*mask)[c]) out(r, c) = 0.0;
        t.accumulate(ia, std::move(out));
      });
}

// Mean cross entropy of row-wise logits against integer targets, as 1x1.
inline Var cross_entropy_with_logits(Var logits, std::vector<std::size_t> targets) {
  const Matrix& lv = logits.value();
  if (targets.size() != lv.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     lv.shape_string());
  }
  if (targets.empty()) throw std::invalid_argument("cross_entropy: empty batch");
  for (std::size_t t : targets) {
    if (t >= lv.cols()) throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " out of range");
  }
  const NodeId il = logits.id();
  auto tg = std::make_shared<const std::vector<std::size_t>>(std::move(targets));
  return logits.tape().record(
      "cross_entropy", {il},
      [il, tg](const Tape& t) {
        const Matrix& x = t.value(il);
        double total = 0.0;
        for (std::size_t r = 0; r < x.rows(); ++r) {
          auto row = x.row(r);
          const double mx = *std::max_element(row.begin(), row.end());
          double s = 0.0;
          for (double v : row) s += std::exp(v - mx);
          total += (std::log(s) + mx) - row[(*tg)[r]];
        }
        return Matrix::scalar(total / static_cast<double>(x.rows()));
      },
      [il, tg](Tape& t, const Matrix& g) {
        Matrix p = kernels::softmax_rows(t.value(il));
        const double w = g.item() / static_cast<double>(p.rows());
        for (std::size_t r = 0; r < p.rows(); ++r) {
          p(r, (*tg)[r]) -= 1.0;
          for (double& v : p.row(r)) v *= w;
        }
        t.accumulate(il, std::move(p));
      });
}

inline Var scatter_add_rows(Var src, std::vector<std::size_t> indices, std::size_t n_rows);

// out[i] = src[indices[i]]
inline Var gather_rows(Var src, std::vector<std::size_t> indices) {
  const Matrix& sv = src.value();
  for (std::size_t i : indices) {
    if (i >= sv.rows()) throw std::out_of_range("gather_rows: index " + std::to_string(i) + " >= " + std::to_string(sv.rows()));
  }
  const NodeId is = src.id();
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(indices));
  return src.tape().record(
      "gather_rows", {is},
      [is, idx](const Tape& t) {
        const Matrix& s = t.value(is);
        Matrix out(idx->size(), s.cols());
        for (std::size_t i = 0; i < idx->size(); ++i) {
          auto from = s.row((*idx)[i]);
          std::copy(from.begin(), from.end(), out.row(i).begin());
        }
        return out;
      },
      [is, idx](Tape& t, const Matrix& g) {
        if (!t.requires_grad(is)) return;
        const Matrix& s = t.value(is);
        Matrix out(s.rows(), s.cols());
        for (std::size_t i = 0; i < idx->size(); ++i) {
          auto dst = out.row((*idx)[i]);
          auto from = g.row(i);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += from[c];
        }
        t.accumulate(is, std::move(out));
      });
}

// out[indices[i]] += src[i], out has n_rows rows.
inline Var scatter_add_rows(Var src, std::vector<std::size_t> indices, std::size_t n_rows) {
  const Matrix& sv = src.value();
  if (indices.size() != sv.rows()) {
    throw ShapeError("scatter_add_rows: " + std::to_string(indices.size()) + " indices for " + sv.shape_string());
  }
  for (std::size_t i : indices) {
    if (i >= n_rows) throw std::out_of_range("scatter_add_rows: index out of range");
  }
  const NodeId is = src.id();
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(indices));
  return src.tape().record(
      "scatter_add_rows", {is},
      [is, idx, n_rows](const Tape& t) {
        const Matrix& s = t.value(is);
        Matrix out(n_rows, s.cols());
        for (std::size_t i = 0; i < idx->size(); ++i) {
          auto dst = out.row((*idx)[i]);
          auto from = s.row(i);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += from[c];
        }
        return out;
      },
      [is, idx](Tape& t, const Matrix& g) {
        Matrix out(idx->size(), g.cols());
        for (std::size_t i = 0; i < idx->size(); ++i) {
          auto from = g.row((*idx)[i]);
          std::copy(from.begin(), from.end(), out.row(i).begin());
        }
        t.accumulate(is, std::move(out));
      });
}

// Multi-head causal self-attention over `batch` sequences of `seq_len` rows
// each (rows ordered batch-major). q, k, v are (batch*seq_len) x d_model.
inline Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq_len, std::size_t n_heads) {
  const Matrix& qv = q.value();
  if (!qv.same_shape(k.value()) || !qv.same_shape(v.value())) {
    throw ShapeError("causal_attention: q/k/v shapes differ");
  }
  if (qv.rows() != batch * seq_len) throw ShapeError("causal_attention: rows != batch*seq_len");
  if (n_heads == 0 || qv.cols() % n_heads != 0) throw ShapeError("causal_attention: d_model not divisible by heads");
  const std::size_t hd = qv.cols() / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const NodeId iq = q.id(), ik = k.id(), iv = v.id();

  // probs[(b*H + h)] is seq_len x seq_len, lower triangular.
  auto probs = std::make_shared<std::vector<Matrix>>();
  auto compute_probs = [=](const Tape& t) {
    const Matrix& Q = t.value(iq);
    const Matrix& K = t.value(ik);
    std::vector<Matrix> out;
    out.reserve(batch * n_heads);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        Matrix p(seq_len, seq_len);
        for (std::size_t i = 0; i < seq_len; ++i) {
          const double* qi = Q.row(b * seq_len + i).data() + h * hd;
          auto pr = p.row(i);
          for (std::size_t j = 0; j <= i; ++j) {
            const double* kj = K.row(b * seq_len + j).data() + h * hd;
            double s = 0.0;
            for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
            pr[j] = s * inv_sqrt;
          }
          kernels::softmax_row_inplace(pr.subspan(0, i + 1));
        }
        out.push_back(std::move(p));
      }
    }
    return out;
  };

  return q.tape().record(
      "causal_attention", {iq, ik, iv},
      [=](const Tape& t) {
        *probs = compute_probs(t);
        const Matrix& V = t.value(iv);
        Matrix out(V.rows(), V.cols());
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const Matrix& p = (*probs)[b * n_heads + h];
            for (std::size_t i = 0; i < seq_len; ++i) {
              double* o = out.row(b * seq_len + i).data() + h * hd;
              for (std::size_t j = 0; j <= i; ++j) {
                const double w = p(i, j);
                const double* vj = V.row(b * seq_len + j).data() + h * hd;
                for (std::size_t c = 0; c < hd; ++c) o[c] += w * vj[c];
              }
            }
          }
        }
        return out;
      },
      [=](Tape& t, const Matrix& g) {
        const Matrix& Q = t.value(iq);
        const Matrix& K = t.value(ik);
        const Matrix& V = t.value(iv);
        Matrix dq(Q.rows(), Q.cols()), dk(K.rows(), K.cols()), dv(V.rows(), V.cols());
        std::vector<double> dp(seq_len);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const Matrix& p = (*probs)[b * n_heads + h];
            for (std::size_t i = 0; i < seq_len; ++i) {
              const double* gi = g.row(b * seq_len + i).data() + h * hd;
              double dot = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                const double* vj = V.row(b * seq_len + j).data() + h * hd;
                double* dvj = dv.row(b * seq_len + j).data() + h * hd;
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) {
                  s += gi[c] * vj[c];
                  dvj[c] += p(i, j) * gi[c];
                }
                dp[j] = s;
                dot += p(i, j) * s;
              }
              const double* qi = Q.row(b * seq_len + i).data() + h * hd;
              double* dqi = dq.row(b * seq_len + i).data() + h * hd;
              for (std::size_t j = 0; j <= i; ++j) {
                const double ds = p(i, j) * (dp[j] - dot) * inv_sqrt;
                if (ds == 0.0) continue;
                const double* kj = K.row(b * seq_len + j).data() + h * hd;
                double* dkj = dk.row(b * seq_len + j).data() + h * hd;
                for (std::size_t c = 0; c < hd; ++c) {
                  dqi[c] += ds * kj[c];
                  dkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
        t.accumulate(iq, std::move(dq));
        t.accumulate(ik, std::move(dk));
        t.accumulate(iv, std::move(dv));
      });
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;

  double skip_rate() const {
    const std::size_t total = checked + skipped;
    return total == 0 ? 0.0 : static_cast<double>(skipped) / static_cast<double>(total);
  }
};

// Loss value plus a fingerprint of every discrete routing choice made while
// computing it; a perturbation that changes the fingerprint crossed a
// selection boundary.
struct LossProbe {
  double loss = 0.0;
  std::uint64_t selection_fingerprint = 0;
};

// Relative error is |a - n| / max(|a|, |n|, floor). The floor keeps
// coordinates whose true gradient is ~0 from being judged on round-off.
inline constexpr double kGradCheckFloor = 1e-6;

inline GradCheckResult grad_check(const std::function<LossProbe(const std::vector<Matrix>&)>& loss_fn,
                                  std::vector<Matrix> params, const std::vector<Matrix>& analytic,
                                  double h = 1e-5) {
  if (analytic.size() != params.size()) throw std::invalid_argument("grad_check: gradient count mismatch");
  GradCheckResult result;
  const LossProbe base = loss_fn(params);
  for (std::size_t p = 0; p < params.size(); ++p) {
    require_same_shape(params[p], analytic[p], "grad_check");
    auto data = params[p].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const LossProbe plus = loss_fn(params);
      data[i] = orig - h;
      const LossProbe minus = loss_fn(params);
      data[i] = orig;
      if (plus.selection_fingerprint != base.selection_fingerprint ||
          minus.selection_fingerprint != base.selection_fingerprint) {
        ++result.skipped;
        continue;
      }
      const double numeric = (plus.loss - minus.loss) / (2.0 * h);
      const double a = analytic[p].data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      result.max_relative_error = std::max(result.max_relative_error, std::abs(a - numeric) / denom);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace dmep::ad
