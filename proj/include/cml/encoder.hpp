#pragma once

// Behavior-aware graph encoder. Each layer sums neighbor embeddings over every
// behavior graph separately, then mixes the behavior channels back into one
// table through mean -> linear -> PReLU.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "cml/core/ops.hpp"
#include "cml/data.hpp"

namespace cml {

// Learnable encoder parameters. T is Tensor for storage and ad::Var once
// bound to a tape.
template <class T>
struct EncoderWeights {
  T user_embedding;                // N x d, layer-0 users
  T item_embedding;                // M x d, layer-0 items
  std::vector<T> layer_weights;    // per layer, d x d, shared by user and item sides
  std::vector<T> layer_slopes;     // per layer, 1x1 PReLU slope

  std::size_t num_layers() const { return layer_weights.size(); }

  std::vector<T*> flat() {
    std::vector<T*> out{&user_embedding, &item_embedding};
    for (auto& w : layer_weights) out.push_back(&w);
    for (auto& s : layer_slopes) out.push_back(&s);
    return out;
  }
  std::vector<const T*> flat() const {
    std::vector<const T*> out{&user_embedding, &item_embedding};
    for (auto& w : layer_weights) out.push_back(&w);
    for (auto& s : layer_slopes) out.push_back(&s);
    return out;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out{"encoder.user_embedding", "encoder.item_embedding"};
    for (std::size_t l = 0; l < layer_weights.size(); ++l) out.push_back("encoder.layer" + std::to_string(l) + ".weight");
    for (std::size_t l = 0; l < layer_slopes.size(); ++l) out.push_back("encoder.layer" + std::to_string(l) + ".slope");
    return out;
  }
};

using EncoderParams = EncoderWeights<Tensor>;
using EncoderVars = EncoderWeights<ad::Var>;

// Glorot/Xavier uniform, with fan_in = cols and fan_out = rows.
template <class Rng>
Tensor xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(rows, cols);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline constexpr double kDefaultPreluSlope = 0.25;

template <class Rng>
EncoderParams init_encoder(std::size_t num_users, std::size_t num_items, std::size_t dim, std::size_t layers, Rng& rng) {
  EncoderParams p;
  p.user_embedding = xavier_uniform(num_users, dim, rng);
  p.item_embedding = xavier_uniform(num_items, dim, rng);
  for (std::size_t l = 0; l < layers; ++l) {
    p.layer_weights.push_back(xavier_uniform(dim, dim, rng));
    p.layer_slopes.push_back(Tensor::scalar(kDefaultPreluSlope));
  }
  return p;
}

inline EncoderVars bind(ad::Tape& tape, const EncoderParams& params, bool requires_grad) {
  EncoderVars out;
  out.user_embedding = tape.leaf(params.user_embedding, requires_grad);
  out.item_embedding = tape.leaf(params.item_embedding, requires_grad);
  for (const auto& w : params.layer_weights) out.layer_weights.push_back(tape.leaf(w, requires_grad));
  for (const auto& s : params.layer_slopes) out.layer_slopes.push_back(tape.leaf(s, requires_grad));
  return out;
}

// Layer-wise embedding tables of one forward pass.
struct EmbeddingState {
  std::vector<ad::Var> user_layers;  // aggregated, layers 0..L
  std::vector<ad::Var> item_layers;
  std::vector<std::vector<ad::Var>> behavior_user;  // [l-1][k] for layers 1..L
  std::vector<std::vector<ad::Var>> behavior_item;
  ad::Var final_user;                  // mean of user_layers
  ad::Var final_item;
  std::vector<ad::Var> behavior_final_user;  // per k, mean over layers 1..L
  std::vector<ad::Var> behavior_final_item;

  std::size_t num_behaviors() const { return behavior_final_user.size(); }
};

struct BehaviorTables {
  std::vector<ad::Var> user;
  std::vector<ad::Var> item;
};

// One round of neighborhood sums per behavior. Every behavior channel reads
// the shared aggregated tables of the previous layer.
inline BehaviorTables propagate_behavior(const BehaviorGraph& graph, const ad::Var& user_in, const ad::Var& item_in) {
  BehaviorTables out;
  for (std::size_t k = 0; k < graph.num_behaviors(); ++k) {
    out.user.push_back(ad::spmm(graph.user_item(k), item_in));
    out.item.push_back(ad::spmm(graph.item_user(k), user_in));
  }
  return out;
}

// PReLU(mean_k(tables) * W) for one side.
inline ad::Var aggregate_behaviors(const std::vector<ad::Var>& tables, const ad::Var& weight, const ad::Var& slope) {
  if (tables.empty()) throw ContractError("aggregate_behaviors: no behavior tables");
  ad::Var acc = tables.front();
  for (std::size_t k = 1; k < tables.size(); ++k) acc = ad::add(acc, tables[k]);
  ad::Var mean = ad::scale(acc, 1.0 / static_cast<double>(tables.size()));
  return ad::prelu(ad::matmul(mean, weight), slope);
}

namespace detail {
inline ad::Var mean_of(const std::vector<ad::Var>& xs) {
  ad::Var acc = xs.front();
  for (std::size_t j = 1; j < xs.size(); ++j) acc = ad::add(acc, xs[j]);
  return ad::scale(acc, 1.0 / static_cast<double>(xs.size()));
}
}  // namespace detail

inline EmbeddingState encode(const BehaviorGraph& graph, const EncoderVars& params) {
  const std::size_t layers = params.num_layers();
  if (layers < 1) throw ConfigError("layers", "encoder needs at least one layer");
  if (params.user_embedding.rows() != graph.num_users || params.item_embedding.rows() != graph.num_items)
    throw ShapeError("encoder tables do not match graph size");
  EmbeddingState st;
  st.user_layers.push_back(params.user_embedding);
  st.item_layers.push_back(params.item_embedding);
  for (std::size_t l = 0; l < layers; ++l) {
    auto bt = propagate_behavior(graph, st.user_layers.back(), st.item_layers.back());
    st.user_layers.push_back(aggregate_behaviors(bt.user, params.layer_weights[l], params.layer_slopes[l]));
    st.item_layers.push_back(aggregate_behaviors(bt.item, params.layer_weights[l], params.layer_slopes[l]));
    st.behavior_user.push_back(std::move(bt.user));
    st.behavior_item.push_back(std::move(bt.item));
  }
  st.final_user = detail::mean_of(st.user_layers);
  st.final_item = detail::mean_of(st.item_layers);
  for (std::size_t k = 0; k < graph.num_behaviors(); ++k) {
    std::vector<ad::Var> us, is;
    for (std::size_t l = 0; l < layers; ++l) {
      us.push_back(st.behavior_user[l][k]);
      is.push_back(st.behavior_item[l][k]);
    }
    st.behavior_final_user.push_back(detail::mean_of(us));
    st.behavior_final_item.push_back(detail::mean_of(is));
  }
  return st;
}

// Plain-tensor copy of the final embeddings, for scoring and export.
struct EmbeddingSnapshot {
  Tensor user;
  Tensor item;
  std::vector<Tensor> behavior_user;
  std::vector<Tensor> behavior_item;
};

inline EmbeddingSnapshot snapshot(const BehaviorGraph& graph, const EncoderParams& params) {
  ad::Tape tape;
  ad::Tape::NoGrad ng(tape);
  auto vars = bind(tape, params, false);
  auto st = encode(graph, vars);
  EmbeddingSnapshot s{st.final_user.value(), st.final_item.value(), {}, {}};
  for (const auto& v : st.behavior_final_user) s.behavior_user.push_back(v.value());
  for (const auto& v : st.behavior_final_item) s.behavior_item.push_back(v.value());
  return s;
}

}  // namespace cml
