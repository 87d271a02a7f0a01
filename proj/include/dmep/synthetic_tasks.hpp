// SPDX-License-Identifier: Apache-2.0
//
// Seeded cluster-structured classification tasks.
//
// Token layout: [0, arity) are label tokens, the next n_clusters ids are
// cluster markers, then one query token, then the content vocabulary. A
// sequence is [marker, content..., query] and the model must emit the label
// token at the query position. Each cluster labels its content with its own
// random linear scorer over token counts, so clusters need different maps.

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmep/numerics.hpp"

namespace dmep {

struct TaskSpec {
  std::size_t n_clusters = 4;
  std::size_t vocab_size = 64;
  std::size_t seq_len = 6;
  std::size_t n_train = 8192;
  std::size_t n_eval = 1000;
  std::size_t label_arity = 4;
  std::uint64_t seed = 7;
  std::vector<double> skew;  // per-cluster weights; empty means balanced
  double margin = 3.0;       // minimum gap between best and runner-up label score

  std::size_t marker_token(std::size_t cluster) const { return label_arity + cluster; }
  std::size_t query_token() const { return label_arity + n_clusters; }
  std::size_t content_begin() const { return query_token() + 1; }
  std::size_t content_vocab() const { return vocab_size - content_begin(); }

  void validate() const {
    if (n_clusters < 2) throw std::invalid_argument("TaskSpec: need at least 2 clusters");
    if (label_arity < 2 || label_arity > vocab_size) {
      throw std::invalid_argument("TaskSpec: label_arity " + std::to_string(label_arity) + " invalid for vocab " +
                                  std::to_string(vocab_size));
    }
    if (content_begin() + 2 > vocab_size) throw std::invalid_argument("TaskSpec: vocabulary too small for layout");
    if (seq_len < 3) throw std::invalid_argument("TaskSpec: seq_len must be at least 3");
    if (n_train == 0 || n_eval == 0) throw std::invalid_argument("TaskSpec: empty split");
    if (!skew.empty()) {
      if (skew.size() != n_clusters) throw std::invalid_argument("TaskSpec: skew length != n_clusters");
      for (double w : skew)
        if (!(w >= 0.0)) throw std::invalid_argument("TaskSpec: negative skew weight");
      if (std::accumulate(skew.begin(), skew.end(), 0.0) <= 0.0) throw std::invalid_argument("TaskSpec: zero skew");
    }
    if (margin < 0.0) throw std::invalid_argument("TaskSpec: negative margin");
  }
};

struct Example {
  std::vector<std::size_t> tokens;
  std::size_t label = 0;
  std::size_t cluster = 0;
};

struct TaskSplits {
  std::vector<Example> train;
  std::vector<Example> eval;
  std::vector<Matrix> scorers;  // per cluster, label_arity x content_vocab
};

inline std::size_t score_label(const TaskSpec& spec, const Matrix& scorer, const std::vector<std::size_t>& content,
                               double* gap = nullptr) {
  std::vector<double> score(spec.label_arity, 0.0);
  for (std::size_t tok : content)
    for (std::size_t j = 0; j < spec.label_arity; ++j) score[j] += scorer(j, tok - spec.content_begin());
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  if (gap != nullptr) *gap = score[order[0]] - score[order[1]];
  return order[0];
}

inline TaskSplits gen_cluster_task(const TaskSpec& spec) {
  spec.validate();
  TaskSplits out;
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32), 0x7A5Cu};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t c = 0; c < spec.n_clusters; ++c) {
    Matrix w(spec.label_arity, spec.content_vocab());
    for (double& v : w.data()) v = normal(rng);
    out.scorers.push_back(std::move(w));
  }
  std::uniform_int_distribution<std::size_t> content_dist(spec.content_begin(), spec.vocab_size - 1);
  const std::size_t n_content = spec.seq_len - 2;

  auto make_split = [&](std::size_t n) {
    std::vector<std::size_t> clusters(n);
    if (spec.skew.empty()) {
      for (std::size_t i = 0; i < n; ++i) clusters[i] = i % spec.n_clusters;
      std::shuffle(clusters.begin(), clusters.end(), rng);
    } else {
      std::discrete_distribution<std::size_t> pick(spec.skew.begin(), spec.skew.end());
      for (auto& c : clusters) c = pick(rng);
    }
    std::vector<Example> split;
    split.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      Example ex;
      ex.cluster = clusters[i];
      std::vector<std::size_t> content(n_content);
      double gap = 0.0;
      do {
        for (auto& t : content) t = content_dist(rng);
        ex.label = score_label(spec, out.scorers[ex.cluster], content, &gap);
      } while (gap < spec.margin);
      ex.tokens.reserve(spec.seq_len);
      ex.tokens.push_back(spec.marker_token(ex.cluster));
      ex.tokens.insert(ex.tokens.end(), content.begin(), content.end());
      ex.tokens.push_back(spec.query_token());
      split.push_back(std::move(ex));
    }
    return split;
  };
  out.train = make_split(spec.n_train);
  out.eval = make_split(spec.n_eval);
  return out;
}

// Example indices grouped into batches; the order is a seeded permutation
// that depends on the epoch. The last batch may be short.
inline std::vector<std::vector<std::size_t>> batch_iter(std::size_t n_examples, std::size_t batch_size,
                                                        std::uint64_t seed, std::size_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batch_iter: batch_size must be positive");
  std::vector<std::size_t> order(n_examples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0xBA7Cu};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n_examples; i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n_examples, i + batch_size)));
  }
  return batches;
}

// One JSON object per line.
inline void dump_examples(std::ostream& os, const std::vector<Example>& split) {
  for (const auto& ex : split) {
    os << "{\"cluster\":" << ex.cluster << ",\"label\":" << ex.label << ",\"tokens\":[";
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) os << (i ? "," : "") << ex.tokens[i];
    os << "]}\n";
  }
}

}  // namespace dmep
