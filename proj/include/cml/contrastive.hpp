#pragma once

// InfoNCE between a user's target-behavior view and each auxiliary-behavior
// view. Positives are the same user under both behaviors; negatives are other
// users' auxiliary views drawn from a shared pool.

#include <algorithm>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "cml/core/log.hpp"
#include "cml/core/ops.hpp"
#include "cml/encoder.hpp"

namespace cml {

enum class Similarity { cosine, dot };

inline Similarity parse_similarity(std::string_view s) {
  if (s == "cosine") return Similarity::cosine;
  if (s == "dot") return Similarity::dot;
  throw ConfigError("similarity", "expected 'cosine' or 'dot', got '" + std::string(s) + "'");
}

inline const char* to_string(Similarity s) { return s == Similarity::cosine ? "cosine" : "dot"; }

struct ContrastiveBatch {
  std::vector<Index> anchors;    // unique users
  std::vector<Index> negatives;  // sampled users shared by every anchor and pair
  double temperature = 0.1;
  Similarity similarity = Similarity::cosine;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("temperature", "must be > 0");
    if (negatives.empty()) throw ConfigError("negatives", "contrastive batch needs at least one negative");
    std::unordered_set<Index> seen;
    for (Index a : anchors)
      if (!seen.insert(a).second) throw ContractError("contrastive anchors must be unique");
  }
};

// Uniform negatives over all users (with replacement).
template <class Rng>
ContrastiveBatch sample_contrastive_batch(std::vector<Index> anchors, std::size_t num_users, std::size_t num_negatives,
                                          double temperature, Similarity sim, Rng& rng) {
  std::sort(anchors.begin(), anchors.end());
  anchors.erase(std::unique(anchors.begin(), anchors.end()), anchors.end());
  ContrastiveBatch b{std::move(anchors), {}, temperature, sim};
  if (num_users == 0) throw ContractError("sample_contrastive_batch: no users");
  std::uniform_int_distribution<Index> pick(0, static_cast<Index>(num_users - 1));
  b.negatives.reserve(num_negatives);
  for (std::size_t s = 0; s < num_negatives; ++s) b.negatives.push_back(pick(rng));
  return b;
}

struct PairLoss {
  Index target = 0;
  Index auxiliary = 0;
  ad::Var total;     // 1x1, sum over anchors
  ad::Var per_user;  // B x 1, aligned with batch.anchors
};

// Logit pushed onto a negative that happens to be the anchor itself, so it
// drops out of the softmax.
inline constexpr double kMaskedLogit = -1e30;

// Per anchor u: -log( exp(phi(t_u, a_u)/tau) / sum_{v in {u} + negatives} exp(phi(t_u, a_v)/tau) ).
// Negatives equal to the anchor are masked out.
inline PairLoss infonce_pair(const ad::Var& target_table, const ad::Var& aux_table, const ContrastiveBatch& batch) {
  batch.validate();
  if (target_table.rows() != aux_table.rows() || target_table.cols() != aux_table.cols())
    throw ShapeError("infonce_pair: view tables differ in shape");
  using namespace ad;
  const std::vector<std::size_t> anchors(batch.anchors.begin(), batch.anchors.end());
  const std::vector<std::size_t> negatives(batch.negatives.begin(), batch.negatives.end());
  Var t = gather_rows(target_table, anchors);
  Var p = gather_rows(aux_table, anchors);
  Var n = gather_rows(aux_table, negatives);
  if (batch.similarity == Similarity::cosine) {
    t = normalize_rows(t);
    p = normalize_rows(p);
    n = normalize_rows(n);
  }
  const double inv_tau = 1.0 / batch.temperature;
  Var pos = scale(row_dot(t, p), inv_tau);
  Var neg = scale(matmul(t, n, false, true), inv_tau);

  bool any_self = false;
  Tensor mask(batch.anchors.size(), batch.negatives.size());
  for (std::size_t a = 0; a < batch.anchors.size(); ++a)
    for (std::size_t s = 0; s < batch.negatives.size(); ++s)
      if (batch.negatives[s] == batch.anchors[a]) {
        mask(a, s) = kMaskedLogit;
        any_self = true;
      }
  if (any_self) neg = add_const(neg, mask);

  Var logits = concat_cols({pos, neg});
  Var per_user = sub(logsumexp_rows(logits), pos);
  return {0, 0, sum(per_user), per_user};
}

inline std::string pair_name(const std::vector<std::string>& behaviors, Index target, Index aux) {
  return behaviors[target] + "-" + behaviors[aux];
}

// One loss per auxiliary behavior, all with the same anchors and negatives.
// Returns nothing (with a warning) when there is only one behavior.
inline std::vector<PairLoss> all_pairs_losses(const EmbeddingState& state, Index target, const ContrastiveBatch& batch) {
  const std::size_t K = state.num_behaviors();
  if (target >= K) throw ContractError("target behavior out of range");
  std::vector<PairLoss> out;
  if (K < 2) {
    log::warn("single behavior: contrastive learning disabled");
    return out;
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (k == target) continue;
    auto pl = infonce_pair(state.behavior_final_user[target], state.behavior_final_user[k], batch);
    pl.target = target;
    pl.auxiliary = static_cast<Index>(k);
    out.push_back(pl);
  }
  return out;
}

}  // namespace cml
