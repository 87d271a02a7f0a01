// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <set>
#include <sstream>

#include "dmep/synthetic_tasks.hpp"

using namespace dmep;

namespace {

bool same_examples(const std::vector<Example>& a, const std::vector<Example>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].tokens != b[i].tokens || a[i].label != b[i].label || a[i].cluster != b[i].cluster) return false;
  return true;
}

}  // namespace

TEST_CASE("generation is deterministic in the seed", "[task]") {
  TaskSpec s;
  s.n_train = 300;
  s.n_eval = 50;
  const TaskSplits a = gen_cluster_task(s), b = gen_cluster_task(s);
  CHECK(same_examples(a.train, b.train));
  CHECK(same_examples(a.eval, b.eval));
  s.seed = 8;
  CHECK_FALSE(same_examples(a.train, gen_cluster_task(s).train));
}

TEST_CASE("examples follow the token layout", "[task]") {
  TaskSpec s;
  s.n_train = 400;
  s.n_eval = 40;
  const TaskSplits t = gen_cluster_task(s);
  for (const auto& ex : t.train) {
    REQUIRE(ex.tokens.size() == s.seq_len);
    CHECK(ex.tokens.front() == s.marker_token(ex.cluster));
    CHECK(ex.tokens.back() == s.query_token());
    CHECK(ex.label < s.label_arity);
    for (std::size_t i = 1; i + 1 < ex.tokens.size(); ++i) {
      CHECK(ex.tokens[i] >= s.content_begin());
      CHECK(ex.tokens[i] < s.vocab_size);
    }
    std::vector<std::size_t> content(ex.tokens.begin() + 1, ex.tokens.end() - 1);
    double gap = 0.0;
    CHECK(score_label(s, t.scorers[ex.cluster], content, &gap) == ex.label);
    CHECK(gap >= s.margin);
  }
}

TEST_CASE("balanced clusters differ by at most one", "[task]") {
  TaskSpec s;
  s.n_train = 1003;
  s.n_eval = 10;
  const TaskSplits t = gen_cluster_task(s);
  std::vector<std::size_t> per(s.n_clusters, 0);
  for (const auto& ex : t.train) ++per[ex.cluster];
  const auto [lo, hi] = std::minmax_element(per.begin(), per.end());
  CHECK(*hi - *lo <= 1);
}

TEST_CASE("skew shifts the cluster mix", "[task]") {
  TaskSpec s;
  s.n_train = 2000;
  s.n_eval = 10;
  s.skew = {0.7, 0.1, 0.1, 0.1};
  const TaskSplits t = gen_cluster_task(s);
  std::size_t first = 0;
  for (const auto& ex : t.train) first += ex.cluster == 0;
  CHECK(first > 1200);
  CHECK(first < 1600);
}

TEST_CASE("batches cover every index once", "[task]") {
  const auto b = batch_iter(10, 4, 3, 0);
  REQUIRE(b.size() == 3);
  CHECK(b[0].size() == 4);
  CHECK(b[1].size() == 4);
  CHECK(b[2].size() == 2);
  std::set<std::size_t> seen;
  for (const auto& batch : b) seen.insert(batch.begin(), batch.end());
  CHECK(seen.size() == 10);
  CHECK(batch_iter(10, 4, 3, 0) == b);
  CHECK(batch_iter(100, 8, 3, 1) != batch_iter(100, 8, 3, 0));
  CHECK(batch_iter(0, 4, 3, 0).empty());
  CHECK_THROWS(batch_iter(10, 0, 3, 0));
}

TEST_CASE("the task is linearly solvable", "[task]") {
  TaskSpec s;
  s.n_train = 4000;
  s.n_eval = 500;
  const TaskSplits t = gen_cluster_task(s);
  const std::size_t cv = s.content_vocab();
  // multiclass perceptron over per-cluster bag-of-words features
  std::vector<Matrix> w(s.n_clusters, Matrix(s.label_arity, cv));
  auto predict = [&](const Example& ex) {
    std::vector<double> score(s.label_arity, 0.0);
    for (std::size_t i = 1; i + 1 < ex.tokens.size(); ++i)
      for (std::size_t j = 0; j < s.label_arity; ++j) score[j] += w[ex.cluster](j, ex.tokens[i] - s.content_begin());
    return static_cast<std::size_t>(std::max_element(score.begin(), score.end()) - score.begin());
  };
  for (int epoch = 0; epoch < 30; ++epoch) {
    for (const auto& ex : t.train) {
      const std::size_t p = predict(ex);
      if (p == ex.label) continue;
      for (std::size_t i = 1; i + 1 < ex.tokens.size(); ++i) {
        w[ex.cluster](ex.label, ex.tokens[i] - s.content_begin()) += 1.0;
        w[ex.cluster](p, ex.tokens[i] - s.content_begin()) -= 1.0;
      }
    }
  }
  std::size_t correct = 0;
  for (const auto& ex : t.eval) correct += predict(ex) == ex.label;
  CHECK(static_cast<double>(correct) / static_cast<double>(t.eval.size()) >= 0.9);
}

TEST_CASE("dump writes one object per line", "[task]") {
  std::vector<Example> split{{{4, 9, 10, 8}, 2, 0}, {{5, 11, 12, 8}, 1, 1}};
  std::ostringstream os;
  dump_examples(os, split);
  CHECK(os.str() == "{\"cluster\":0,\"label\":2,\"tokens\":[4,9,10,8]}\n{\"cluster\":1,\"label\":1,\"tokens\":[5,11,12,8]}\n");
}

TEST_CASE("invalid task specs are rejected", "[task]") {
  TaskSpec s;
  s.n_clusters = 1;
  CHECK_THROWS_AS(gen_cluster_task(s), std::invalid_argument);
  s = TaskSpec{};
  s.vocab_size = 9;
  CHECK_THROWS_AS(gen_cluster_task(s), std::invalid_argument);
  s = TaskSpec{};
  s.skew = {1.0, 1.0};
  CHECK_THROWS_AS(gen_cluster_task(s), std::invalid_argument);
  s = TaskSpec{};
  s.seq_len = 2;
  CHECK_THROWS_AS(gen_cluster_task(s), std::invalid_argument);
  s = TaskSpec{};
  s.margin = -1.0;
  CHECK_THROWS_AS(gen_cluster_task(s), std::invalid_argument);
}
