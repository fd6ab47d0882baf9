#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cml/core/gradcheck.hpp"
#include "cml/encoder.hpp"
#include "test_util.hpp"

using namespace cml;
using cml::testing::random_tensor;
using cml::testing::random_triples;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Dense reference: out[u] = sum_i A[u][i] * x[i].
Tensor dense_product(const Tensor& A, const Tensor& x) {
  Tensor out(A.rows(), x.cols());
  for (std::size_t u = 0; u < A.rows(); ++u)
    for (std::size_t i = 0; i < A.cols(); ++i)
      for (std::size_t c = 0; c < x.cols(); ++c) out(u, c) += A(u, i) * x(i, c);
  return out;
}

Tensor prelu_ref(const Tensor& x, double a) {
  Tensor y = x;
  for (auto& v : y.data()) v = v >= 0 ? v : a * v;
  return y;
}

EncoderParams identity_params(const Tensor& users, const Tensor& items, std::size_t layers) {
  EncoderParams p;
  p.user_embedding = users;
  p.item_embedding = items;
  for (std::size_t l = 0; l < layers; ++l) {
    p.layer_weights.push_back(Tensor::identity(users.cols()));
    p.layer_slopes.push_back(Tensor::scalar(0.25));
  }
  return p;
}

}  // namespace

TEST(Propagate, IsolatedUserGetsZero) {
  std::vector<Interaction> t{{0, 0, 0}, {0, 1, 0}};
  auto g = build_graph(2, 2, 1, t, false);
  ad::Tape tape;
  auto u = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  auto i = tape.constant(Tensor::matrix({{5, 6}, {7, 8}}));
  auto bt = propagate_behavior(g, u, i);
  EXPECT_EQ(bt.user[0].value()(1, 0), 0.0);
  EXPECT_EQ(bt.user[0].value()(1, 1), 0.0);
}

TEST(Propagate, UnnormalizedIsNeighborSum) {
  std::vector<Interaction> t{{0, 0, 0}, {0, 2, 0}};
  auto g = build_graph(1, 3, 1, t, false);
  ad::Tape tape;
  auto u = tape.constant(Tensor(1, 2));
  auto i = tape.constant(Tensor::matrix({{1, 2}, {10, 20}, {100, 200}}));
  auto bt = propagate_behavior(g, u, i);
  EXPECT_EQ(bt.user[0].value(), Tensor::matrix({{101, 202}}));
}

TEST(Propagate, MatchesDenseOracle) {
  for (double density : {0.5, 0.8}) {
    std::mt19937_64 rng(7);
    auto t = random_triples(3, 3, 2, density, rng);
    for (bool norm : {false, true}) {
      auto g = build_graph(3, 3, 2, t, norm);
      ad::Tape tape;
      Tensor U = random_tensor(3, 4, rng), I = random_tensor(3, 4, rng);
      auto bt = propagate_behavior(g, tape.constant(U), tape.constant(I));
      for (std::size_t k = 0; k < 2; ++k) {
        Tensor A = g.adjacency[k].densify();
        Tensor At(3, 3);
        for (std::size_t r = 0; r < 3; ++r)
          for (std::size_t c = 0; c < 3; ++c) At(c, r) = A(r, c);
        EXPECT_LT(max_abs_diff(bt.user[k].value(), dense_product(A, I)), 1e-12);
        EXPECT_LT(max_abs_diff(bt.item[k].value(), dense_product(At, U)), 1e-12);
      }
    }
  }
}

TEST(Aggregate, SingleBehaviorIdentityOnPositiveInputIsIdentity) {
  ad::Tape tape;
  Tensor x = Tensor::matrix({{0.5, 1.5}, {2.0, 0.1}});
  auto out = aggregate_behaviors({tape.constant(x)}, tape.constant(Tensor::identity(2)), tape.constant(Tensor::scalar(0.25)));
  EXPECT_EQ(out.value(), x);
}

TEST(Aggregate, OpposingTablesCancel) {
  std::mt19937_64 rng(3);
  ad::Tape tape;
  Tensor x = random_tensor(4, 3, rng);
  Tensor nx = x;
  for (auto& v : nx.data()) v = -v;
  auto out = aggregate_behaviors({tape.constant(x), tape.constant(nx)}, tape.constant(random_tensor(3, 3, rng)),
                                 tape.constant(Tensor::scalar(0.25)));
  EXPECT_EQ(out.value().max_abs(), 0.0);
}

TEST(Aggregate, MatchesCompositionOracle) {
  std::mt19937_64 rng(11);
  ad::Tape tape;
  std::vector<Tensor> xs{random_tensor(5, 4, rng), random_tensor(5, 4, rng), random_tensor(5, 4, rng)};
  Tensor W = random_tensor(4, 4, rng);
  std::vector<ad::Var> vs;
  for (auto& x : xs) vs.push_back(tape.constant(x));
  auto out = aggregate_behaviors(vs, tape.constant(W), tape.constant(Tensor::scalar(0.2)));

  Tensor mean(5, 4);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = (xs[0][i] + xs[1][i] + xs[2][i]) / 3.0;
  Tensor lin(5, 4);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t j = 0; j < 4; ++j) lin(r, c) += mean(r, j) * W(j, c);
  EXPECT_LT(max_abs_diff(out.value(), prelu_ref(lin, 0.2)), 1e-12);
}

TEST(Encode, OneLayerUnrolled) {
  std::vector<Interaction> t{{0, 0, 0}, {0, 1, 0}, {1, 1, 0}};
  auto g = build_graph(2, 2, 1, t, false);
  Tensor U = Tensor::matrix({{1, -1}, {0.5, 2}});
  Tensor I = Tensor::matrix({{-3, 1}, {1, 1}});
  ad::Tape tape;
  auto st = encode(g, bind(tape, identity_params(U, I, 1), false));
  Tensor A = g.adjacency[0].densify();
  Tensor l1 = prelu_ref(dense_product(A, I), 0.25);
  Tensor expect(2, 2);
  for (std::size_t i = 0; i < 4; ++i) expect[i] = (U[i] + l1[i]) / 2.0;
  EXPECT_LT(max_abs_diff(st.final_user.value(), expect), 1e-15);
  EXPECT_EQ(st.user_layers.size(), 2u);
  // behavior view excludes layer 0
  EXPECT_LT(max_abs_diff(st.behavior_final_user[0].value(), dense_product(A, I)), 1e-15);
}

TEST(Encode, ZeroEmbeddingsGiveZeroOutputs) {
  std::mt19937_64 rng(5);
  auto t = random_triples(6, 5, 3, 0.4, rng);
  auto g = build_graph(6, 5, 3, t, true);
  auto p = init_encoder(6, 5, 4, 3, rng);
  p.user_embedding = Tensor(6, 4);
  p.item_embedding = Tensor(5, 4);
  ad::Tape tape;
  auto st = encode(g, bind(tape, p, false));
  EXPECT_EQ(st.final_user.value().max_abs(), 0.0);
  EXPECT_EQ(st.final_item.value().max_abs(), 0.0);
  for (auto& v : st.behavior_final_user) EXPECT_EQ(v.value().max_abs(), 0.0);
}

TEST(Encode, RejectsZeroLayers) {
  std::vector<Interaction> t{{0, 0, 0}};
  auto g = build_graph(1, 1, 1, t, false);
  std::mt19937_64 rng(1);
  auto p = init_encoder(1, 1, 2, 0, rng);
  ad::Tape tape;
  EXPECT_THROW(encode(g, bind(tape, p, false)), ConfigError);
}

TEST(Encode, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  auto t = random_triples(4, 5, 2, 0.5, rng);
  auto g = build_graph(4, 5, 2, t, true);
  auto p = init_encoder(4, 5, 3, 2, rng);
  Tensor probe_u = random_tensor(4, 3, rng), probe_i = random_tensor(5, 3, rng);
  auto f = [&](ad::Tape& tape, const std::vector<ad::Var>& in) {
    EncoderVars v;
    v.user_embedding = in[0];
    v.item_embedding = in[1];
    v.layer_weights = {in[2], in[3]};
    v.layer_slopes = {in[4], in[5]};
    auto st = encode(g, v);
    return ad::add(ad::sum(ad::mul_const(st.final_user, probe_u)),
                   ad::sum(ad::mul_const(ad::mul(st.final_item, st.final_item), probe_i)));
  };
  auto flat = p.flat();
  std::vector<Tensor> inputs;
  for (auto* x : flat) inputs.push_back(*x);
  auto r = ad::check_gradients("encode", f, inputs);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Encode, PermutationEquivariance) {
  std::mt19937_64 rng(8);
  const std::size_t N = 7, M = 6;
  auto t = random_triples(N, M, 2, 0.4, rng);
  auto p = init_encoder(N, M, 4, 2, rng);
  std::vector<Index> perm(N);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);

  auto tp = t;
  for (auto& x : tp) x.user = perm[x.user];
  EncoderParams pp = p;
  for (std::size_t u = 0; u < N; ++u)
    for (std::size_t c = 0; c < 4; ++c) pp.user_embedding(perm[u], c) = p.user_embedding(u, c);

  auto a = snapshot(build_graph(N, M, 2, t, true), p);
  auto b = snapshot(build_graph(N, M, 2, tp, true), pp);
  for (std::size_t u = 0; u < N; ++u)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(b.user(perm[u], c), a.user(u, c), 1e-14);
  EXPECT_LT(max_abs_diff(a.item, b.item), 1e-14);
}

// |x W|_max <= |x|_max * max column-abs-sum of W, and a row of A sums at most
// ||A||_inf; PReLU with |slope| <= 1 does not expand.
TEST(Encode, LayerMagnitudeBound) {
  for (std::uint64_t seed : {1, 2, 3, 4}) {
    std::mt19937_64 rng(seed);
    auto t = random_triples(12, 9, 3, 0.3, rng);
    for (bool norm : {true, false}) {
      auto g = build_graph(12, 9, 3, t, norm);
      auto p = init_encoder(12, 9, 5, 3, rng);
      ad::Tape tape;
      auto st = encode(g, bind(tape, p, false));
      double a_inf = 0.0;
      for (auto& A : g.adjacency) {
        for (const SparseMatrix* m : std::vector<const SparseMatrix*>{&A, &A.transposed()}) {
          for (std::size_t r = 0; r < m->rows(); ++r) {
            double s = 0.0;
            for (double v : m->row_values(r)) s += std::abs(v);
            a_inf = std::max(a_inf, s);
          }
        }
      }
      for (std::size_t l = 0; l < 3; ++l) {
        const Tensor& W = p.layer_weights[l];
        double w1 = 0.0;
        for (std::size_t c = 0; c < W.cols(); ++c) {
          double s = 0.0;
          for (std::size_t r = 0; r < W.rows(); ++r) s += std::abs(W(r, c));
          w1 = std::max(w1, s);
        }
        const double in = std::max(st.user_layers[l].value().max_abs(), st.item_layers[l].value().max_abs());
        const double out = std::max(st.user_layers[l + 1].value().max_abs(), st.item_layers[l + 1].value().max_abs());
        EXPECT_LE(out, in * a_inf * w1 * (1 + 1e-12));
      }
    }
  }
}

// An empty extra behavior only enlarges the mean's denominator: every layer-l
// table shrinks by exactly (K/(K+1))^l, by positive homogeneity.
TEST(Encode, EmptyBehaviorScalesThroughDenominator) {
  std::mt19937_64 rng(13);
  auto t = random_triples(5, 6, 2, 0.5, rng);
  auto p = init_encoder(5, 6, 3, 3, rng);
  ad::Tape tape;
  auto a = encode(build_graph(5, 6, 2, t, true), bind(tape, p, false));
  auto b = encode(build_graph(5, 6, 3, t, true), bind(tape, p, false));
  for (std::size_t l = 1; l <= 3; ++l) {
    const double c = std::pow(2.0 / 3.0, static_cast<double>(l));
    Tensor expect = a.user_layers[l].value();
    for (auto& v : expect.data()) v *= c;
    EXPECT_LT(max_abs_diff(b.user_layers[l].value(), expect), 1e-12);
  }
}

TEST(Encode, Deterministic) {
  std::mt19937_64 rng(17);
  auto t = random_triples(8, 8, 3, 0.3, rng);
  auto g = build_graph(8, 8, 3, t, true);
  auto p = init_encoder(8, 8, 4, 3, rng);
  auto a = snapshot(g, p);
  auto b = snapshot(g, p);
  EXPECT_EQ(a.user, b.user);
  EXPECT_EQ(a.item, b.item);
  EXPECT_EQ(a.behavior_user, b.behavior_user);
}

TEST(Init, XavierBoundsAndSlope) {
  std::mt19937_64 rng(2);
  auto p = init_encoder(50, 40, 8, 2, rng);
  const double bu = std::sqrt(6.0 / 58.0);
  EXPECT_LE(p.user_embedding.max_abs(), bu);
  EXPECT_LE(p.layer_weights[0].max_abs(), std::sqrt(6.0 / 16.0));
  EXPECT_EQ(p.layer_slopes[1].item(), 0.25);
  EXPECT_EQ(p.names().size(), p.flat().size());
}
