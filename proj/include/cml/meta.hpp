#pragma once

// Meta contrastive encoding: per-user meta-knowledge built from a loss value
// and the user's embeddings, mapped to a personalized loss weight.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cml/core/ops.hpp"

namespace cml {

// xi(Z) = PReLU(Z * weight + bias), producing one scalar per row.
template <class T>
struct WeightHead {
  T weight;  // width x 1
  T bias;    // 1 x 1
  T slope;   // 1 x 1
};

// Two heads per loss family: one for the loss-broadcast form (3d wide) and
// one for the loss-scaled form (2d wide). One set weights the contrastive
// pairs, the other the BPR samples. `pair_gates` holds one scalar per
// auxiliary pair and is used only by the uniform-gate ablation.
template <class T>
struct MetaWeights {
  WeightHead<T> cl_broadcast;
  WeightHead<T> cl_scaled;
  WeightHead<T> bpr_broadcast;
  WeightHead<T> bpr_scaled;
  T pair_gates;  // 1 x P

  std::vector<T*> flat() {
    std::vector<T*> out;
    for (auto* h : {&cl_broadcast, &cl_scaled, &bpr_broadcast, &bpr_scaled}) {
      out.push_back(&h->weight);
      out.push_back(&h->bias);
      out.push_back(&h->slope);
    }
    out.push_back(&pair_gates);
    return out;
  }
  std::vector<const T*> flat() const {
    std::vector<const T*> out;
    for (auto* h : {&cl_broadcast, &cl_scaled, &bpr_broadcast, &bpr_scaled}) {
      out.push_back(&h->weight);
      out.push_back(&h->bias);
      out.push_back(&h->slope);
    }
    out.push_back(&pair_gates);
    return out;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const char* h : {"meta.cl_broadcast", "meta.cl_scaled", "meta.bpr_broadcast", "meta.bpr_scaled"}) {
      out.push_back(std::string(h) + ".weight");
      out.push_back(std::string(h) + ".bias");
      out.push_back(std::string(h) + ".slope");
    }
    out.push_back("meta.pair_gates");
    return out;
  }
};

using MetaParams = MetaWeights<Tensor>;
using MetaVars = MetaWeights<ad::Var>;

// Projection starts at zero and each bias at 0.5, so both heads sum to a
// weight of exactly 1 for every user before any meta update.
inline MetaParams init_meta(std::size_t dim, std::size_t num_pairs) {
  auto head = [](std::size_t width) {
    return WeightHead<Tensor>{Tensor(width, 1), Tensor::scalar(0.5), Tensor::scalar(0.25)};
  };
  return {head(3 * dim), head(2 * dim), head(3 * dim), head(2 * dim), Tensor(1, std::max<std::size_t>(num_pairs, 1), 1.0)};
}

inline MetaVars bind(ad::Tape& tape, const MetaParams& p, bool requires_grad) {
  auto head = [&](const WeightHead<Tensor>& h) {
    return WeightHead<ad::Var>{tape.leaf(h.weight, requires_grad), tape.leaf(h.bias, requires_grad),
                               tape.leaf(h.slope, requires_grad)};
  };
  return {head(p.cl_broadcast), head(p.cl_scaled), head(p.bpr_broadcast), head(p.bpr_scaled),
          tape.leaf(p.pair_gates, requires_grad)};
}

struct MetaKnowledge {
  ad::Var broadcast;  // B x 3d: (loss * gamma repeated d times) | e_aux | e_user
  ad::Var scaled;     // B x 2d: loss * (e_aux | e_user)
};

// `loss` is B x 1 and row-aligned with both embedding blocks.
inline MetaKnowledge encode_meta_knowledge(const ad::Var& loss, const ad::Var& user_emb, const ad::Var& aux_emb,
                                           double gamma) {
  if (loss.cols() != 1) throw ContractError("meta-knowledge loss must be a column, got " + loss.value().shape());
  if (loss.rows() != user_emb.rows() || loss.rows() != aux_emb.rows())
    throw ContractError("meta-knowledge inputs are not row-aligned: loss " + loss.value().shape() + ", user " +
                        user_emb.value().shape() + ", aux " + aux_emb.value().shape());
  if (user_emb.cols() != aux_emb.cols()) throw ContractError("meta-knowledge embedding widths differ");
  using namespace ad;
  const std::size_t d = user_emb.cols();
  Var dup = scale(expand_cols(loss, d), gamma);
  Var both = concat_cols({aux_emb, user_emb});
  return {concat_cols({dup, aux_emb, user_emb}), mul_rows(both, loss)};
}

inline ad::Var apply_head(const WeightHead<ad::Var>& h, const ad::Var& z) {
  using namespace ad;
  Var pre = add(matmul(z, h.weight), expand(h.bias, z.rows(), 1));
  return prelu(pre, h.slope);
}

// omega = xi_1(Z1) + xi_2(Z2), one weight per row. Dropout on Z only when training.
template <class Rng>
ad::Var meta_weight(const WeightHead<ad::Var>& broadcast_head, const WeightHead<ad::Var>& scaled_head,
                    const MetaKnowledge& z, double dropout, bool training, Rng& rng) {
  auto z1 = ad::dropout(z.broadcast, dropout, training, rng);
  auto z2 = ad::dropout(z.scaled, dropout, training, rng);
  return ad::add(apply_head(broadcast_head, z1), apply_head(scaled_head, z2));
}

// One block of the training objective: per-row losses and their weights.
struct WeightedTerm {
  ad::Var weights;  // B x 1
  ad::Var losses;   // B x 1
  bool contrastive = false;
};

// sum over contrastive terms of beta * <w, l>, plus sum over BPR terms of
// <w, l>, plus an optional regularizer.
inline ad::Var weighted_objective(const std::vector<WeightedTerm>& terms, double beta,
                                  const std::optional<ad::Var>& regularizer) {
  std::optional<ad::Var> total = regularizer;
  for (const auto& t : terms) {
    if (!t.weights.value().same_shape(t.losses.value()))
      throw ContractError("weighted_objective: weights " + t.weights.value().shape() + " vs losses " +
                          t.losses.value().shape());
    ad::Var v = ad::sum(ad::mul(t.weights, t.losses));
    if (t.contrastive) v = ad::scale(v, beta);
    total = total ? ad::add(*total, v) : v;
  }
  if (!total) throw ContractError("weighted_objective: nothing to combine");
  return *total;
}

}  // namespace cml
