#pragma once

// Finite-difference checks over every differentiable op and the composite
// training objective, on toy shapes.

#include <random>
#include <string>
#include <vector>

#include "cml/core/gradcheck.hpp"
#include "cml/core/ops.hpp"
#include "cml/trainer.hpp"

namespace cml {

struct GradCheckCase {
  std::string name;
  ad::ScalarFunction f;
  std::vector<Tensor> inputs;
};

namespace detail {

inline Tensor uniform_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

}  // namespace detail

inline std::vector<GradCheckCase> primitive_gradcheck_cases(std::uint64_t seed) {
  using namespace ad;
  std::mt19937_64 rng(seed);
  auto any = [&](std::size_t r, std::size_t c) { return cml::detail::uniform_tensor(r, c, rng, -1.0, 1.0); };
  auto pos = [&](std::size_t r, std::size_t c) { return cml::detail::uniform_tensor(r, c, rng, 0.5, 2.0); };

  std::vector<SparseMatrix::Entry> es;
  std::bernoulli_distribution on(0.5);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      if (on(rng)) es.push_back({r, c, std::uniform_real_distribution<double>(0.1, 2.0)(rng)});
  auto s = std::make_shared<SparseMatrix>(4, 3, std::move(es));
  const std::vector<std::size_t> idx{2, 0, 2, 1};
  const Tensor w = any(4, 3);  // readout weights so every output entry matters
  const Tensor w33 = any(3, 3);
  const Tensor c43 = any(4, 3);

  using X = const std::vector<Var>&;
  return {
      {"add", [w](Tape&, X x) { return sum(mul_const(add(x[0], x[1]), w)); }, {any(4, 3), any(4, 3)}},
      {"sub", [w](Tape&, X x) { return sum(mul_const(sub(x[0], x[1]), w)); }, {any(4, 3), any(4, 3)}},
      {"neg", [w](Tape&, X x) { return sum(mul_const(neg(x[0]), w)); }, {any(4, 3)}},
      {"mul", [](Tape&, X x) { return sum(mul(x[0], x[1])); }, {any(4, 3), any(4, 3)}},
      {"scale", [w](Tape&, X x) { return sum(mul_const(scale(x[0], -1.7), w)); }, {any(4, 3)}},
      {"add_scalar", [](Tape&, X x) { return sum(mul(add_scalar(x[0], 0.3), x[0])); }, {any(4, 3)}},
      {"add_const", [c43](Tape&, X x) { return sum(mul(add_const(x[0], c43), x[0])); }, {any(4, 3)}},
      {"mul_scalar", [w](Tape&, X x) { return sum(mul_const(mul_scalar(x[0], x[1]), w)); }, {any(4, 3), any(1, 1)}},
      {"mul_rows", [w](Tape&, X x) { return sum(mul_const(mul_rows(x[0], x[1]), w)); }, {any(4, 3), any(4, 1)}},
      {"add_row_bias", [](Tape&, X x) { return sum(mul(add_row_bias(x[0], x[1]), add_row_bias(x[0], x[1]))); },
       {any(4, 3), any(1, 3)}},
      {"matmul", [w](Tape&, X x) { return sum(mul_const(matmul(x[0], x[1]), w)); }, {any(4, 2), any(2, 3)}},
      {"matmul_ta", [w](Tape&, X x) { return sum(mul_const(matmul(x[0], x[1], true, false), w)); }, {any(2, 4), any(2, 3)}},
      {"matmul_tb", [w](Tape&, X x) { return sum(mul_const(matmul(x[0], x[1], false, true), w)); }, {any(4, 2), any(3, 2)}},
      {"matmul_tt", [w](Tape&, X x) { return sum(mul_const(matmul(x[0], x[1], true, true), w)); }, {any(3, 4), any(3, 3)}},
      {"transpose", [w](Tape&, X x) { return sum(mul_const(transpose(x[0]), w)); }, {any(3, 4)}},
      {"spmm", [s, w](Tape&, X x) { return sum(mul_const(spmm(*s, x[0]), w)); }, {any(3, 3)}},
      {"slice_pad", [w](Tape&, X x) { return sum(mul_const(pad_cols(slice_cols(x[0], 1, 2), 0, 3), w)); }, {any(4, 3)}},
      {"concat", [](Tape&, X x) { return sum(mul(concat_cols({x[0], x[1], x[0]}), concat_cols({x[0], x[1], x[0]}))); },
       {any(4, 1), any(4, 2)}},
      {"gather", [idx](Tape&, X x) { return sum(mul(gather_rows(x[0], idx), gather_rows(x[0], idx))); }, {any(3, 3)}},
      {"scatter", [w](Tape&, X x) { return sum(mul_const(scatter_rows(x[0], {3, 1, 3}, 4), w)); }, {any(3, 3)}},
      {"expand", [w](Tape&, X x) { return sum(mul_const(expand(x[0], 4, 3), w)); }, {any(1, 1)}},
      {"expand_rows", [w](Tape&, X x) { return sum(mul_const(expand_rows(x[0], 4), w)); }, {any(1, 3)}},
      {"expand_cols", [w](Tape&, X x) { return sum(mul_const(expand_cols(x[0], 3), w)); }, {any(4, 1)}},
      {"exp", [w](Tape&, X x) { return sum(mul_const(exp(x[0]), w)); }, {any(4, 3)}},
      {"log", [w](Tape&, X x) { return sum(mul_const(ad::log(x[0]), w)); }, {pos(4, 3)}},
      {"sqrt", [w](Tape&, X x) { return sum(mul_const(ad::sqrt(x[0]), w)); }, {pos(4, 3)}},
      {"reciprocal", [w](Tape&, X x) { return sum(mul_const(reciprocal(x[0]), w)); }, {pos(4, 3)}},
      {"sigmoid", [w](Tape&, X x) { return sum(mul_const(sigmoid(x[0]), w)); }, {any(4, 3)}},
      {"log_sigmoid", [w](Tape&, X x) { return sum(mul_const(log_sigmoid(x[0]), w)); }, {any(4, 3)}},
      {"logsumexp", [](Tape&, X x) { return sum(mul(logsumexp_rows(x[0]), logsumexp_rows(x[0]))); }, {any(4, 3)}},
      {"normalize", [w](Tape&, X x) { return sum(mul_const(normalize_rows(x[0]), w)); }, {any(4, 3)}},
      {"cosine", [](Tape&, X x) { return sum(mul(cosine_similarity(x[0], x[1]), cosine_similarity(x[0], x[1]))); },
       {any(4, 3), any(4, 3)}},
      {"row_dot", [](Tape&, X x) { return sum(mul(row_dot(x[0], x[1]), row_dot(x[0], x[1]))); }, {any(4, 3), any(4, 3)}},
      {"squared_norm", [](Tape&, X x) { return squared_norm(x[0]); }, {any(4, 3)}},
      {"prelu", [w](Tape&, X x) { return sum(mul_const(prelu(x[0], x[1]), w)); }, {any(4, 3), any(1, 1)}},
      {"colsum", [](Tape&, X x) { return sum(mul(colsum(x[0]), colsum(x[0]))); }, {any(4, 3)}},
      {"rowsum", [](Tape&, X x) { return sum(mul(rowsum(x[0]), rowsum(x[0]))); }, {any(4, 3)}},
      {"mean", [](Tape&, X x) { return mul(mean(x[0]), mean(x[0])); }, {any(4, 3)}},
      {"dropout",
       [w](Tape&, X x) {
         std::mt19937_64 fixed(7);  // same mask on every evaluation
         return sum(mul_const(dropout(x[0], 0.4, true, fixed), w));
       },
       {any(4, 3)}},
      {"second_order",
       [w33](Tape& t, X x) {
         // d/dx of <grad_x f, w> for f = sum(sigmoid(x W) * x W)
         auto inner = [&](const Var& v) { return sum(mul(sigmoid(matmul(v, x[1])), matmul(v, x[1]))); };
         std::vector<Var> wrt{x[0]};
         auto g = t.gradients(inner(x[0]), wrt, true);
         return sum(mul_const(g[0], w33));
       },
       {any(3, 3), any(3, 3)}},
  };
}

// A square whose backward rule drops the factor 2. The suite must flag it.
inline GradCheckCase negative_control_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto bad_square = [](const ad::Var& a) {
    Tensor y = a.value();
    for (auto& v : y.data()) v *= v;
    return a.tape->record("bad_square", std::move(y), {a},
                          [a](const ad::Var& g, const std::vector<bool>&) -> std::vector<std::optional<ad::Var>> {
                            return {ad::mul(g, a)};
                          });
  };
  return {"negative_control", [bad_square](ad::Tape&, const std::vector<ad::Var>& x) { return ad::sum(bad_square(x[0])); },
          {detail::uniform_tensor(3, 3, rng, 0.5, 2.0)}};
}

// Toy multi-behavior problem for the composite checks: 6 users, 5 items,
// 3 behaviors, d = 4, two layers.
struct CompositeToy {
  BehaviorGraph graph;
  EncoderParams encoder;
  MetaParams meta;
  Batch batch;
  std::vector<BprSample> meta_batch;
  Index target = 2;
  TrainConfig cfg;
};

inline CompositeToy make_composite_toy(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  CompositeToy t;
  const std::size_t N = 6, M = 5, K = 3, d = 4;
  std::vector<Interaction> triples;
  std::bernoulli_distribution on(0.45);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t u = 0; u < N; ++u) {
      triples.push_back({static_cast<Index>(u), static_cast<Index>((u + k) % M), static_cast<Index>(k)});
      for (std::size_t i = 0; i < M; ++i)
        if (i != (u + k) % M && on(rng)) triples.push_back({static_cast<Index>(u), static_cast<Index>(i), static_cast<Index>(k)});
    }
  t.graph = build_graph(N, M, K, triples, true);
  t.encoder = init_encoder(N, M, d, 2, rng);
  t.meta = init_meta(d, K - 1);
  // small random projections so every meta parameter matters
  for (auto* p : t.meta.flat())
    if (p->rows() > 1) *p = detail::uniform_tensor(p->rows(), 1, rng, -0.05, 0.05);
  t.meta.pair_gates = detail::uniform_tensor(1, K - 1, rng, 0.5, 1.5);

  t.cfg.dim = d;
  t.cfg.layers = 2;
  t.cfg.gamma = 2.0;
  t.cfg.beta = 0.7;
  t.cfg.lambda = 1e-2;
  t.cfg.temperature = 0.5;
  t.cfg.meta_dropout = 0.0;
  t.cfg.detach_meta_inputs = false;
  PositiveSets pos(N, triples, t.target);
  t.batch.bpr = sample_bpr(triples, pos, t.target, M, 5, rng);
  std::vector<Index> anchors;
  for (const auto& s : t.batch.bpr) anchors.push_back(s.user);
  t.batch.contrastive = sample_contrastive_batch(anchors, N, 4, t.cfg.temperature, Similarity::cosine, rng);
  t.meta_batch = sample_bpr(triples, pos, t.target, M, 4, rng);
  return t;
}

inline std::vector<Tensor> composite_inputs(const CompositeToy& t) {
  std::vector<Tensor> in;
  for (const auto* p : t.encoder.flat()) in.push_back(*p);
  for (const auto* p : t.meta.flat()) in.push_back(*p);
  return in;
}

namespace detail {

inline std::pair<EncoderVars, MetaVars> split_inputs(const CompositeToy& t, const std::vector<ad::Var>& x) {
  EncoderVars ev;
  std::size_t j = 0;
  ev.user_embedding = x[j++];
  ev.item_embedding = x[j++];
  for (std::size_t l = 0; l < t.encoder.num_layers(); ++l) ev.layer_weights.push_back(x[j++]);
  for (std::size_t l = 0; l < t.encoder.num_layers(); ++l) ev.layer_slopes.push_back(x[j++]);
  MetaVars mv;
  for (auto* h : {&mv.cl_broadcast, &mv.cl_scaled, &mv.bpr_broadcast, &mv.bpr_scaled}) {
    h->weight = x[j++];
    h->bias = x[j++];
    h->slope = x[j++];
  }
  mv.pair_gates = x[j++];
  return {ev, mv};
}

}  // namespace detail

// The weighted objective (contrastive + BPR + meta weights + L2) under each
// weighting mode, and the one-step lookahead meta loss, as functions of every
// encoder and meta parameter.
inline std::vector<GradCheckCase> composite_gradcheck_cases(std::uint64_t seed) {
  auto toy = std::make_shared<CompositeToy>(make_composite_toy(seed));
  std::vector<GradCheckCase> out;
  for (Ablation a : {Ablation::none, Ablation::mke, Ablation::clf}) {
    out.push_back({std::string("objective/") + to_string(a),
                   [toy, a](ad::Tape&, const std::vector<ad::Var>& x) {
                     auto [ev, mv] = detail::split_inputs(*toy, x);
                     TrainConfig cfg = toy->cfg;
                     cfg.ablation = a;
                     std::mt19937_64 unused(0);
                     return build_objective(toy->graph, ev, mv, toy->batch, toy->target, cfg, false, unused).total;
                   },
                   composite_inputs(*toy)});
  }
  out.push_back({"lookahead",
                 [toy](ad::Tape&, const std::vector<ad::Var>& x) {
                   auto [ev, mv] = detail::split_inputs(*toy, x);
                   TrainConfig cfg = toy->cfg;
                   // cfg keeps meta inputs attached: a detach would hide a path finite differences still see
                   std::mt19937_64 unused(0);
                   return lookahead_loss(toy->graph, ev, mv, toy->batch, toy->meta_batch, toy->target, cfg, 0.05, false, unused);
                 },
                 composite_inputs(*toy)});
  return out;
}

inline std::vector<ad::GradCheckResult> run_gradcheck_suite(std::uint64_t seed, double tolerance = 1e-4) {
  std::vector<ad::GradCheckResult> results;
  for (auto& c : primitive_gradcheck_cases(seed)) results.push_back(ad::check_gradients(c.name, c.f, c.inputs, 1e-5, tolerance));
  for (auto& c : composite_gradcheck_cases(seed)) results.push_back(ad::check_gradients(c.name, c.f, c.inputs, 1e-5, tolerance));
  return results;
}

}  // namespace cml
