#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "cml/eval.hpp"
#include "test_util.hpp"

using namespace cml;

namespace {

InteractionStore catalog(std::size_t users, std::size_t items) {
  InteractionStore s;
  for (std::size_t u = 0; u < users; ++u) s.user_ids.push_back("u" + std::to_string(u));
  for (std::size_t i = 0; i < items; ++i) s.item_ids.push_back("i" + std::to_string(i));
  s.behavior_names = {"view", "buy"};
  s.target = 1;
  return s;
}

ScoreFunction table_scorer(const std::vector<std::vector<double>>& table) {
  return [&table](Index u, std::span<const Index> items, std::span<double> out) {
    for (std::size_t j = 0; j < items.size(); ++j) out[j] = table[u][items[j]];
  };
}

}  // namespace

TEST(Metrics, ClosedForms) {
  EXPECT_EQ(ndcg_at(1, 10), 1.0);
  EXPECT_NEAR(ndcg_at(3, 10), 0.5, 1e-12);
  EXPECT_EQ(ndcg_at(11, 10), 0.0);
  std::vector<double> s{0.9, 0.5, 0.7, 0.1};
  std::vector<Index> items{4, 7, 2, 9};
  EXPECT_EQ(rank_of_positive(s, items, 4), 1u);
  EXPECT_EQ(rank_of_positive(s, items, 7), 3u);
  EXPECT_EQ(rank_of_positive(s, items, 9), 4u);
  EXPECT_THROW(rank_of_positive(s, items, 5), ContractError);
}

TEST(Metrics, TiesGoToLowerItemIndex) {
  std::vector<double> s{1.0, 1.0, 1.0};
  std::vector<Index> items{5, 3, 8};
  EXPECT_EQ(rank_of_positive(s, items, 3), 1u);
  EXPECT_EQ(rank_of_positive(s, items, 5), 2u);
  EXPECT_EQ(rank_of_positive(s, items, 8), 3u);
}

// 20 users, 15 candidates each; the positive is planted at a known rank.
TEST(Evaluate, PlantedScoresMatchHandComputation) {
  std::mt19937_64 rng(12);
  const std::size_t U = 20, M = 15;
  std::vector<std::vector<double>> table(U, std::vector<double>(M));
  std::vector<RankingTask> tasks;
  double hr = 0.0, ndcg = 0.0;
  for (std::size_t u = 0; u < U; ++u) {
    const std::size_t planted = u % M + 1;  // 1..15
    RankingTask t{static_cast<Index>(u), static_cast<Index>((3 * u) % M), {}};
    for (std::size_t i = 0; i < M; ++i) t.candidates.push_back(static_cast<Index>(i));
    std::vector<Index> others;
    for (std::size_t i = 0; i < M; ++i)
      if (i != t.positive) others.push_back(static_cast<Index>(i));
    std::shuffle(others.begin(), others.end(), rng);
    // distinct descending scores: slot r gets 100 - r
    std::size_t slot = 1;
    for (Index i : others) {
      if (slot == planted) ++slot;
      table[u][i] = 100.0 - static_cast<double>(slot++);
    }
    table[u][t.positive] = 100.0 - static_cast<double>(planted);
    tasks.push_back(t);
    if (planted <= 10) {
      hr += 1.0;
      ndcg += 1.0 / std::log2(static_cast<double>(planted) + 1.0);
    }
  }
  auto r = evaluate_tasks(tasks, table_scorer(table), 10, "planted");
  EXPECT_NEAR(r.hr, hr / U, 1e-15);
  EXPECT_NEAR(r.ndcg, ndcg / U, 1e-15);
  for (std::size_t u = 0; u < U; ++u) EXPECT_EQ(r.per_user[u].rank, u % M + 1);
  EXPECT_LE(r.ndcg, r.hr);
}

TEST(Evaluate, AllLastGivesZero) {
  std::vector<std::vector<double>> table(3, std::vector<double>(30));
  std::vector<RankingTask> tasks;
  for (Index u = 0; u < 3; ++u) {
    RankingTask t{u, static_cast<Index>(u + 2), {}};
    for (Index i = 0; i < 30; ++i) {
      t.candidates.push_back(i);
      table[u][i] = i == t.positive ? -5.0 : static_cast<double>(i);
    }
    tasks.push_back(t);
  }
  auto r = evaluate_tasks(tasks, table_scorer(table), 10);
  EXPECT_EQ(r.hr, 0.0);
  EXPECT_EQ(r.ndcg, 0.0);
}

TEST(Evaluate, MinusInfinityCandidateChangesNothing) {
  std::mt19937_64 rng(3);
  std::vector<std::vector<double>> table(5, std::vector<double>(40));
  for (auto& row : table)
    for (auto& v : row) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  std::vector<RankingTask> tasks;
  for (Index u = 0; u < 5; ++u) {
    RankingTask t{u, u, {}};
    for (Index i = 0; i < 30; ++i) t.candidates.push_back(i);
    tasks.push_back(t);
  }
  auto before = evaluate_tasks(tasks, table_scorer(table), 10);
  for (auto& row : table) row[35] = -std::numeric_limits<double>::infinity();
  for (auto& t : tasks) t.candidates.push_back(35);
  auto after = evaluate_tasks(tasks, table_scorer(table), 10);
  EXPECT_EQ(before.hr, after.hr);
  EXPECT_EQ(before.ndcg, after.ndcg);
}

TEST(Evaluate, MonotoneTransformInvariance) {
  std::mt19937_64 rng(4);
  const std::size_t U = 12, M = 25;
  std::vector<std::vector<double>> table(U, std::vector<double>(M)), warped = table;
  for (std::size_t u = 0; u < U; ++u)
    for (std::size_t i = 0; i < M; ++i) {
      table[u][i] = std::uniform_real_distribution<double>(-2, 2)(rng);
      warped[u][i] = std::exp(3.0 * table[u][i]) + 7.0;
    }
  std::vector<RankingTask> tasks;
  for (Index u = 0; u < U; ++u) {
    RankingTask t{u, static_cast<Index>(u * 2), {}};
    for (Index i = 0; i < M; ++i) t.candidates.push_back(i);
    tasks.push_back(t);
  }
  auto a = evaluate_tasks(tasks, table_scorer(table), 10);
  auto b = evaluate_tasks(tasks, table_scorer(warped), 10);
  EXPECT_EQ(a.hr, b.hr);
  EXPECT_EQ(a.ndcg, b.ndcg);
}

TEST(EvalNegatives, NinetyNinePlusPositive) {
  auto s = catalog(1, 100);
  s.triples = {{0, 0, 1}};
  PositiveSets excluded(1, s.triples, 1);
  std::mt19937_64 rng(1);
  // user has target edges {0} (train) and 42 (test): 98 eligible < 99
  auto few = sample_eval_negatives(excluded, 0, 42, 100, 99, rng);
  EXPECT_EQ(few.size(), 99u);
  // only the held-out positive: 99 eligible
  PositiveSets none(1, {}, 1);
  auto c = sample_eval_negatives(none, 0, 42, 100, 99, rng);
  EXPECT_EQ(c.size(), 100u);
  EXPECT_EQ(c.back(), 42u);
  EXPECT_EQ(std::set<Index>(c.begin(), c.end()).size(), 100u);
}

TEST(EvalNegatives, DeterministicAndNeverTouchingPositives) {
  std::mt19937_64 gen(5);
  auto s = catalog(50, 400);
  s.triples = cml::testing::random_triples(50, 400, 2, 0.05, gen);
  std::vector<std::optional<Index>> held(50);
  for (Index u = 0; u < 50; ++u) {
    held[u] = static_cast<Index>(u * 7 % 400);
    s.triples.push_back({u, *held[u], 1});
  }
  // de-duplicate the planted test edges
  std::sort(s.triples.begin(), s.triples.end(), [](auto& a, auto& b) {
    return std::tie(a.user, a.item, a.behavior) < std::tie(b.user, b.item, b.behavior);
  });
  s.triples.erase(std::unique(s.triples.begin(), s.triples.end(), [](auto& a, auto& b) { return a.same_edge(b); }),
                  s.triples.end());

  EvalProtocol p;
  auto a = build_ranking_tasks(s, held, p);
  auto b = build_ranking_tasks(s, held, p);
  ASSERT_EQ(a.size(), 50u);
  PositiveSets pos(50, s.triples, 1);
  std::size_t checks = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    EXPECT_EQ(a[j].candidates, b[j].candidates);
    EXPECT_EQ(std::set<Index>(a[j].candidates.begin(), a[j].candidates.end()).size(), a[j].candidates.size());
    for (Index i : a[j].candidates) {
      if (i == a[j].positive) continue;
      EXPECT_FALSE(pos.contains(a[j].user, i));
      ++checks;
    }
  }
  // repeat with other seeds until 10^4 memberships have been checked
  for (std::uint64_t seed = 1; checks < 10000; ++seed) {
    p.seed = seed;
    for (const auto& t : build_ranking_tasks(s, held, p))
      for (Index i : t.candidates)
        if (i != t.positive) {
          EXPECT_FALSE(pos.contains(t.user, i));
          ++checks;
        }
  }
}

TEST(EvalNegatives, UsersWithoutHeldOutItemAreSkipped) {
  auto s = catalog(3, 10);
  s.triples = {{0, 1, 1}, {2, 3, 1}};
  std::vector<std::optional<Index>> held{Index{1}, std::nullopt, Index{3}};
  std::size_t skipped = 0;
  EvalProtocol p;
  p.num_negatives = 4;
  auto tasks = build_ranking_tasks(s, held, p, &skipped);
  EXPECT_EQ(tasks.size(), 2u);
  EXPECT_EQ(skipped, 1u);
}

TEST(EvalNegatives, FullRankUsesEveryUnseenItem) {
  auto s = catalog(1, 10);
  s.triples = {{0, 1, 1}, {0, 4, 1}, {0, 5, 0}};
  std::vector<std::optional<Index>> held{Index{4}};
  EvalProtocol p;
  p.full_rank = true;
  auto tasks = build_ranking_tasks(s, held, p);
  ASSERT_EQ(tasks.size(), 1u);
  EXPECT_EQ(tasks[0].candidates, (std::vector<Index>{0, 2, 3, 4, 5, 6, 7, 8, 9}));
  EXPECT_EQ(p.describe(), "full-rank");
  EXPECT_EQ(EvalProtocol{}.describe(), "sampled-99");
}

TEST(Score, DotProductOfFinalEmbeddings) {
  EmbeddingSnapshot s{Tensor::matrix({{1, 2}, {0, 0}}), Tensor::matrix({{3, -1}, {0, 0}}), {}, {}};
  EXPECT_EQ(score(s, 0, 0), 1.0);
  EXPECT_EQ(score(s, 1, 1), 0.0);
  EXPECT_THROW(score(s, 2, 0), std::out_of_range);
  EXPECT_THROW(score(s, 0, 5), std::out_of_range);
}

TEST(Score, TopOneMatchesBruteForceArgmax) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    EmbeddingSnapshot s{cml::testing::random_tensor(1, 4, rng), cml::testing::random_tensor(3, 4, rng), {}, {}};
    std::vector<Index> items{0, 1, 2};
    std::vector<double> out(3);
    embedding_scorer(s)(0, items, out);
    std::size_t best = 0;
    double best_v = -INFINITY;
    for (std::size_t i = 0; i < 3; ++i) {
      double v = 0;
      for (std::size_t c = 0; c < 4; ++c) v += s.user(0, c) * s.item(i, c);
      if (v > best_v) best_v = v, best = i;
    }
    EXPECT_EQ(rank_of_positive(out, items, static_cast<Index>(best)), 1u);
  }
}
