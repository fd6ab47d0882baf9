#pragma once

// Leave-one-out top-K evaluation with HR@K and NDCG@K.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cml/core/log.hpp"
#include "cml/data.hpp"
#include "cml/encoder.hpp"

namespace cml {

struct RankingTask {
  Index user = 0;
  Index positive = 0;
  std::vector<Index> candidates;  // includes the positive
};

struct UserResult {
  Index user = 0;
  Index positive = 0;
  std::size_t rank = 0;  // 1-based
  double hr = 0.0;
  double ndcg = 0.0;
};

struct MetricReport {
  std::size_t k = 10;
  double hr = 0.0;
  double ndcg = 0.0;
  std::string protocol;
  std::size_t evaluated_users = 0;
  std::size_t skipped_users = 0;
  std::vector<UserResult> per_user;

  nlohmann::json to_json() const {
    return {{"k", k},
            {"hr", hr},
            {"ndcg", ndcg},
            {"protocol", protocol},
            {"evaluated_users", evaluated_users},
            {"skipped_users", skipped_users}};
  }
};

struct EvalProtocol {
  bool full_rank = false;
  std::size_t num_negatives = 99;
  std::size_t k = 10;
  std::uint64_t seed = 2022;

  std::string describe() const {
    return full_rank ? std::string("full-rank") : "sampled-" + std::to_string(num_negatives);
  }
};

// 1-based position of the positive among the candidates after sorting by
// score descending, ties going to the lower item index.
inline std::size_t rank_of_positive(std::span<const double> scores, std::span<const Index> items, Index positive) {
  double pos_score = 0.0;
  bool found = false;
  for (std::size_t j = 0; j < items.size(); ++j)
    if (items[j] == positive) {
      pos_score = scores[j];
      found = true;
      break;
    }
  if (!found) throw ContractError("positive item missing from candidates");
  std::size_t rank = 1;
  for (std::size_t j = 0; j < items.size(); ++j) {
    if (items[j] == positive) continue;
    if (scores[j] > pos_score || (scores[j] == pos_score && items[j] < positive)) ++rank;
  }
  return rank;
}

inline double ndcg_at(std::size_t rank, std::size_t k) { return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0; }

// N items drawn uniformly without replacement from those u has no
// target-behavior edge with, plus the positive (last).
template <class Rng>
std::vector<Index> sample_eval_negatives(const PositiveSets& excluded, Index user, Index positive, std::size_t num_items,
                                         std::size_t n, Rng& rng) {
  const auto& pos = excluded.items(user);
  const std::size_t blocked = pos.size() + (excluded.contains(user, positive) ? 0 : 1);
  const std::size_t eligible = num_items > blocked ? num_items - blocked : 0;
  std::vector<Index> out;
  if (eligible < n) {
    log::warn("user " + std::to_string(user) + " has only " + std::to_string(eligible) + " eligible negatives");
    for (Index i = 0; i < num_items; ++i)
      if (i != positive && !excluded.contains(user, i)) out.push_back(i);
  } else if (eligible < 4 * n) {
    // Dense case: shuffle the eligible list.
    std::vector<Index> pool;
    for (Index i = 0; i < num_items; ++i)
      if (i != positive && !excluded.contains(user, i)) pool.push_back(i);
    for (std::size_t j = 0; j < n; ++j) {
      std::uniform_int_distribution<std::size_t> d(j, pool.size() - 1);
      std::swap(pool[j], pool[d(rng)]);
    }
    out.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
  } else {
    std::uniform_int_distribution<Index> pick(0, static_cast<Index>(num_items - 1));
    while (out.size() < n) {
      Index i = pick(rng);
      if (i == positive || excluded.contains(user, i)) continue;
      if (std::find(out.begin(), out.end(), i) != out.end()) continue;
      out.push_back(i);
    }
  }
  out.push_back(positive);
  return out;
}

// Tasks for users that have a held-out item. Negatives avoid every known
// target-behavior edge of the user (train, meta and test).
inline std::vector<RankingTask> build_ranking_tasks(const InteractionStore& store, const std::vector<std::optional<Index>>& held_out,
                                                    const EvalProtocol& protocol, std::size_t* skipped = nullptr) {
  PositiveSets excluded(store.num_users(), store.triples, store.target);
  for (std::size_t u = 0; u < held_out.size(); ++u)
    if (held_out[u]) excluded.add(static_cast<Index>(u), *held_out[u]);
  std::mt19937_64 rng(protocol.seed);
  std::vector<RankingTask> tasks;
  std::size_t skip = 0;
  for (std::size_t u = 0; u < store.num_users(); ++u) {
    if (u >= held_out.size() || !held_out[u] || *held_out[u] >= store.num_items()) {
      ++skip;
      continue;
    }
    RankingTask t{static_cast<Index>(u), *held_out[u], {}};
    if (protocol.full_rank) {
      for (Index i = 0; i < store.num_items(); ++i)
        if (i == t.positive || !excluded.contains(t.user, i)) t.candidates.push_back(i);
    } else {
      t.candidates = sample_eval_negatives(excluded, t.user, t.positive, store.num_items(), protocol.num_negatives, rng);
    }
    tasks.push_back(std::move(t));
  }
  if (skipped) *skipped = skip;
  return tasks;
}

using ScoreFunction = std::function<void(Index user, std::span<const Index> items, std::span<double> out)>;

inline MetricReport evaluate_tasks(const std::vector<RankingTask>& tasks, const ScoreFunction& score, std::size_t k,
                                   std::string protocol = {}) {
  MetricReport r;
  r.k = k;
  r.protocol = std::move(protocol);
  std::vector<double> scores;
  for (const auto& t : tasks) {
    scores.assign(t.candidates.size(), 0.0);
    score(t.user, t.candidates, scores);
    UserResult ur{t.user, t.positive, rank_of_positive(scores, t.candidates, t.positive)};
    ur.hr = ur.rank <= k ? 1.0 : 0.0;
    ur.ndcg = ndcg_at(ur.rank, k);
    r.hr += ur.hr;
    r.ndcg += ur.ndcg;
    r.per_user.push_back(ur);
  }
  r.evaluated_users = tasks.size();
  if (!tasks.empty()) {
    r.hr /= static_cast<double>(tasks.size());
    r.ndcg /= static_cast<double>(tasks.size());
  }
  return r;
}

// Dot product of final user and item embeddings.
inline double score(const EmbeddingSnapshot& s, Index user, Index item) {
  if (user >= s.user.rows() || item >= s.item.rows())
    throw std::out_of_range("score: index out of range (user " + std::to_string(user) + ", item " + std::to_string(item) + ")");
  auto u = s.user.row(user);
  auto i = s.item.row(item);
  double acc = 0.0;
  for (std::size_t c = 0; c < u.size(); ++c) acc += u[c] * i[c];
  return acc;
}

inline ScoreFunction embedding_scorer(const EmbeddingSnapshot& s) {
  return [&s](Index user, std::span<const Index> items, std::span<double> out) {
    for (std::size_t j = 0; j < items.size(); ++j) out[j] = score(s, user, items[j]);
  };
}

inline MetricReport evaluate(const EmbeddingSnapshot& s, const InteractionStore& store, const SplitAssignment& split,
                             const EvalProtocol& protocol) {
  std::size_t skipped = 0;
  auto tasks = build_ranking_tasks(store, split.test_item, protocol, &skipped);
  auto r = evaluate_tasks(tasks, embedding_scorer(s), protocol.k, protocol.describe());
  r.skipped_users = skipped;
  return r;
}

}  // namespace cml
