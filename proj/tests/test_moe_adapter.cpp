// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "dmep/moe_adapter.hpp"

using namespace dmep;
using Catch::Approx;

namespace {

const ModuleId kMod{0, ProjKind::Q};

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double std = 1.0) {
  std::normal_distribution<double> nd(0.0, std);
  Matrix m(r, c);
  for (double& v : m.data()) v = nd(rng);
  return m;
}

// Plain loops: sum over selected experts of p_i * scaling * B_i (A_i x).
Matrix reference_delta(const ExpertBank& bank, const Matrix& x, const RoutingDecision& d) {
  Matrix out(x.rows(), bank.d_out);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    for (std::size_t i : d.selected[t]) {
      const Matrix a = bank.expert_a(i), b = bank.expert_b(i);
      for (std::size_t o = 0; o < bank.d_out; ++o) {
        double acc = 0.0;
        for (std::size_t j = 0; j < bank.rank; ++j) {
          double ax = 0.0;
          for (std::size_t c = 0; c < bank.d_in; ++c) ax += a(j, c) * x(t, c);
          acc += b(o, j) * ax;
        }
        out(t, o) += d.probs(t, i) * bank.scaling() * acc;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("fresh bank has zero B and zero delta", "[moe]") {
  std::mt19937_64 rng(1);
  const ExpertBank bank = init_expert_bank(kMod, 8, 6, 2, 4, 16.0, 42);
  CHECK(bank.n_experts() == 4);
  CHECK(bank.scaling() == 8.0);
  for (double v : bank.b_stack.data()) CHECK(v == 0.0);
  bool any_nonzero_a = false;
  for (double v : bank.a_stack.data()) any_nonzero_a |= v != 0.0;
  CHECK(any_nonzero_a);
  const Matrix x = random_matrix(5, 8, rng);
  const Matrix delta = adapter_forward(bank, x, route(bank, x, 2));
  for (double v : delta.data()) CHECK(v == 0.0);
}

TEST_CASE("bank init is deterministic per seed and module", "[moe]") {
  const ExpertBank a = init_expert_bank(kMod, 32, 32, 8, 8, 16.0, 7);
  const ExpertBank b = init_expert_bank(kMod, 32, 32, 8, 8, 16.0, 7);
  const ExpertBank c = init_expert_bank(kMod, 32, 32, 8, 8, 16.0, 8);
  const ExpertBank d = init_expert_bank(ModuleId{1, ProjKind::Q}, 32, 32, 8, 8, 16.0, 7);
  CHECK(a.checksum() == b.checksum());
  CHECK(a.checksum() != c.checksum());
  CHECK(a.checksum() != d.checksum());
  CHECK(a.a_stack.rows() == 8);
  CHECK(a.a_stack.cols() == 8 * 32);
  CHECK(a.b_stack.cols() == 32 * 8);
  CHECK(a.gate.cols() == 32);
}

TEST_CASE("bank init rejects bad shapes", "[moe]") {
  CHECK_THROWS_AS(init_expert_bank(kMod, 4, 4, 5, 2, 1.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(init_expert_bank(kMod, 4, 4, 2, 0, 1.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(init_expert_bank(kMod, 0, 4, 2, 2, 1.0, 1), std::invalid_argument);
}

TEST_CASE("trainable parameter count", "[moe]") {
  CHECK(bank_param_count(32, 32, 4, 8) == 2304);
  CHECK(bank_param_count(32, 32, 4, 3) == 864);
  CHECK(trainable_param_count(init_expert_bank(kMod, 32, 32, 4, 8, 16.0, 1)) == 2304);
}

TEST_CASE("routing with a zero gate is uniform with lower-index ties", "[moe]") {
  ExpertBank bank = init_expert_bank(kMod, 3, 3, 1, 4, 1.0, 1);
  bank.gate = Matrix(4, 3);
  const Matrix x = Matrix::from_rows({{1, 2, 3}, {-1, 0, 5}});
  const RoutingDecision d = route(bank, x, 2);
  for (double v : d.probs.data()) CHECK(v == 0.25);
  for (const auto& s : d.selected) CHECK(s == std::vector<std::size_t>{0, 1});
}

TEST_CASE("routing probabilities from known logits", "[moe]") {
  ExpertBank bank = init_expert_bank(kMod, 1, 1, 1, 2, 1.0, 1);
  bank.gate = Matrix::from_rows({{0.0}, {std::log(3.0)}});
  const RoutingDecision d = route(bank, Matrix::from_rows({{1.0}}), 1);
  CHECK(d.probs(0, 0) == Approx(0.25).margin(1e-15));
  CHECK(d.probs(0, 1) == Approx(0.75).margin(1e-15));
  CHECK(d.selected[0] == std::vector<std::size_t>{1});
}

TEST_CASE("a dominant expert is always selected", "[moe]") {
  std::mt19937_64 rng(3);
  ExpertBank bank = init_expert_bank(kMod, 4, 4, 1, 4, 1.0, 1);
  bank.gate = random_matrix(4, 4, rng, 0.01);
  Matrix x = random_matrix(20, 4, rng);
  for (std::size_t t = 0; t < x.rows(); ++t) x(t, 0) = 1.0;
  for (std::size_t c = 0; c < 4; ++c) bank.gate(2, c) = 0.0;
  bank.gate(2, 0) = 10.0;
  const RoutingDecision d = route(bank, x, 2);
  for (const auto& s : d.selected) CHECK(std::find(s.begin(), s.end(), 2u) != s.end());
  for (std::size_t t = 0; t < d.tokens(); ++t) {
    double s = 0.0;
    for (double v : d.probs.row(t)) s += v;
    CHECK(s == Approx(1.0).margin(1e-12));
    CHECK(d.selected[t] == topk_indices(d.probs.row(t), 2));
  }
}

TEST_CASE("single expert equals dense LoRA", "[moe]") {
  std::mt19937_64 rng(5);
  ExpertBank bank = init_expert_bank(kMod, 6, 5, 2, 1, 16.0, 9);
  bank.b_stack = random_matrix(1, 5 * 2, rng);
  const Matrix x = random_matrix(7, 6, rng);
  const RoutingDecision d = route(bank, x, 1);
  for (double p : d.probs.data()) CHECK(p == 1.0);
  const Matrix delta = adapter_forward(bank, x, d);
  const Matrix ba = kernels::matmul(bank.expert_b(0), bank.expert_a(0));
  const Matrix dense = kernels::matmul_nt(x, ba);
  for (std::size_t i = 0; i < delta.size(); ++i) CHECK(delta.data()[i] == Approx(8.0 * dense.data()[i]).margin(1e-12));
}

TEST_CASE("opposite experts under equal weights cancel", "[moe]") {
  std::mt19937_64 rng(6);
  ExpertBank bank = init_expert_bank(kMod, 4, 3, 2, 2, 2.0, 1);
  bank.gate = Matrix(2, 4);
  const Matrix a = random_matrix(1, 8, rng), b = random_matrix(1, 6, rng);
  for (std::size_t c = 0; c < 8; ++c) bank.a_stack(0, c) = bank.a_stack(1, c) = a(0, c);
  for (std::size_t c = 0; c < 6; ++c) {
    bank.b_stack(0, c) = b(0, c);
    bank.b_stack(1, c) = -b(0, c);
  }
  const Matrix x = random_matrix(3, 4, rng);
  const Matrix delta = adapter_forward(bank, x, route(bank, x, 2));
  for (double v : delta.data()) CHECK(v == Approx(0.0).margin(1e-15));
}

TEST_CASE("adapter forward matches a loop reference", "[moe]") {
  std::mt19937_64 rng(7);
  ExpertBank bank = init_expert_bank(kMod, 6, 4, 2, 5, 4.0, 3);
  bank.b_stack = random_matrix(5, 8, rng);
  const Matrix x = random_matrix(9, 6, rng);
  const RoutingDecision d = route(bank, x, 2);
  const Matrix got = adapter_forward(bank, x, d);
  const Matrix ref = reference_delta(bank, x, d);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.data()[i] == Approx(ref.data()[i]).margin(1e-12));
}

TEST_CASE("balancing loss closed forms", "[moe]") {
  SECTION("uniform load and probabilities give 1") {
    RoutingDecision d;
    d.k = 1;
    d.probs = Matrix(4, 4, 0.25);
    d.selected = {{0}, {1}, {2}, {3}};
    CHECK(aux_loss(d) == Approx(1.0).margin(1e-15));
  }
  SECTION("full collapse gives N") {
    RoutingDecision d;
    d.k = 1;
    d.probs = Matrix(3, 5);
    for (std::size_t t = 0; t < 3; ++t) d.probs(t, 0) = 1.0;
    d.selected = {{0}, {0}, {0}};
    CHECK(aux_loss(d) == Approx(5.0).margin(1e-15));
  }
  SECTION("single expert gives 1") {
    std::mt19937_64 rng(1);
    ExpertBank bank = init_expert_bank(kMod, 3, 3, 1, 1, 1.0, 1);
    const Matrix x = random_matrix(6, 3, rng);
    CHECK(aux_loss(route(bank, x, 1)) == 1.0);
  }
  SECTION("k = 2 fractions use tokens times k") {
    RoutingDecision d;
    d.k = 2;
    d.probs = Matrix(2, 4, 0.25);
    d.selected = {{0, 1}, {2, 3}};
    CHECK(aux_loss(d) == Approx(1.0).margin(1e-15));
    const auto f = assignment_fractions(d);
    for (double v : f) CHECK(v == 0.25);
  }
}

TEST_CASE("routed delta on the tape agrees with the direct path", "[moe]") {
  std::mt19937_64 rng(8);
  ExpertBank bank = init_expert_bank(kMod, 5, 4, 2, 4, 16.0, 2);
  bank.b_stack = random_matrix(4, 8, rng, 0.1);
  const Matrix x = random_matrix(6, 5, rng);
  ad::Tape tape;
  BankVars vars = place_on_tape(tape, bank, true);
  RoutedDelta rd = routed_delta(bank, vars, tape.constant(x), 2);
  const RoutingDecision d = route(bank, x, 2);
  CHECK(rd.decision.selected == d.selected);
  const Matrix direct = adapter_forward(bank, x, d);
  for (std::size_t i = 0; i < direct.size(); ++i) CHECK(rd.delta.value().data()[i] == Approx(direct.data()[i]).margin(1e-13));
}

TEST_CASE("moe_combine and balancing loss gradients match finite differences", "[moe]") {
  std::mt19937_64 rng(10);
  ExpertBank bank = init_expert_bank(kMod, 5, 4, 2, 4, 16.0, 2);
  bank.b_stack = random_matrix(4, 8, rng, 0.3);
  const Matrix x = random_matrix(6, 5, rng);
  const Matrix w = random_matrix(6, 4, rng);

  auto build = [&](ad::Tape& tape, const std::vector<Matrix>& p, std::uint64_t* fp) {
    ExpertBank b = bank;
    b.a_stack = p[0];
    b.b_stack = p[1];
    b.gate = p[2];
    BankVars vars{tape.leaf(p[0], true), tape.leaf(p[1], true), tape.leaf(p[2], true)};
    ad::Var xv = tape.leaf(p[3], true);
    RoutedDelta rd = routed_delta(b, vars, xv, 2);
    if (fp != nullptr) {
      std::uint64_t h = 0;
      for (const auto& s : rd.decision.selected)
        for (std::size_t i : s) h = h * 31 + i + 1;
      *fp = h;
    }
    ad::Var task = ad::sum(ad::mul(rd.delta, tape.constant(w)));
    ad::Var aux = ad::load_balance_loss(rd.probs, assignment_fractions(rd.decision));
    return ad::add(task, ad::scale(aux, 0.5));
  };
  const std::vector<Matrix> params{bank.a_stack, bank.b_stack, bank.gate, x};
  ad::Tape tape;
  ad::Var loss = build(tape, params, nullptr);
  auto g = tape.backward(loss);
  std::vector<Matrix> analytic;
  for (std::uint32_t i = 0; i < 4; ++i) analytic.push_back(g.at(ad::NodeId{i}));
  auto fn = [&](const std::vector<Matrix>& p) {
    ad::Tape t;
    std::uint64_t fp = 0;
    const double v = build(t, p, &fp).value().item();
    return ad::LossProbe{v, fp};
  };
  const auto r = ad::grad_check(fn, params, analytic);
  CHECK(r.max_relative_error < 1e-6);
  CHECK(r.skip_rate() < 0.05);
}

TEST_CASE("routing input shape is checked", "[moe]") {
  const ExpertBank bank = init_expert_bank(kMod, 4, 4, 1, 3, 1.0, 1);
  CHECK_THROWS_AS(route(bank, Matrix(2, 5), 1), ShapeError);
  CHECK_THROWS(route(bank, Matrix(2, 4), 4));
  CHECK_THROWS(route(bank, Matrix(2, 4), 0));
}
