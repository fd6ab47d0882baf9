#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cml/core/tape.hpp"
#include "cml/core/tensor.hpp"

// Differentiable operations on tape variables. Every backward rule is written
// with these same ops, so gradients recorded with create_graph can be
// differentiated again (needed to push the meta objective through a lookahead
// update).
namespace cml::ad {

using Grads = std::vector<std::optional<Var>>;

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

inline void require_scalar(const char* op, const Tensor& s) {
  if (!s.is_scalar()) throw ShapeError(std::string(op) + ": expected scalar, got " + s.shape());
}

}  // namespace detail

inline Var detach(const Var& a) { return a.tape->constant(a.value()); }

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape("add", a.value(), b.value());
  return a.tape->record("add", detail::zip(a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
                        [](const Var& g, const std::vector<bool>&) -> Grads { return {g, g}; });
}

inline Var scale(const Var& a, double c) {
  return a.tape->record("scale", detail::map(a.value(), [c](double x) { return c * x; }), {a},
                        [c](const Var& g, const std::vector<bool>&) -> Grads { return {scale(g, c)}; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape("sub", a.value(), b.value());
  return a.tape->record("sub", detail::zip(a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
                        [](const Var& g, const std::vector<bool>& need) -> Grads {
                          return {g, need[1] ? std::optional<Var>(neg(g)) : std::nullopt};
                        });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape("mul", a.value(), b.value());
  return a.tape->record("mul", detail::zip(a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
                        [a, b](const Var& g, const std::vector<bool>& need) -> Grads {
                          Grads out(2);
                          if (need[0]) out[0] = mul(g, b);
                          if (need[1]) out[1] = mul(g, a);
                          return out;
                        });
}

inline Var add_scalar(const Var& a, double c) {
  return a.tape->record("add_scalar", detail::map(a.value(), [c](double x) { return x + c; }), {a},
                        [](const Var& g, const std::vector<bool>&) -> Grads { return {g}; });
}

// Elementwise product with a constant tensor (masks, dropout).
inline Var mul_const(const Var& a, const Tensor& c) {
  detail::require_same_shape("mul_const", a.value(), c);
  return a.tape->record("mul_const", detail::zip(a.value(), c, [](double x, double y) { return x * y; }), {a},
                        [c](const Var& g, const std::vector<bool>&) -> Grads { return {mul_const(g, c)}; });
}

inline Var add_const(const Var& a, const Tensor& c) {
  detail::require_same_shape("add_const", a.value(), c);
  return a.tape->record("add_const", detail::zip(a.value(), c, [](double x, double y) { return x + y; }), {a},
                        [](const Var& g, const std::vector<bool>&) -> Grads { return {g}; });
}

// op(a) * op(b) with optional transposes.
inline Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false) {
  return a.tape->record(
      "matmul", kernels::matmul(a.value(), b.value(), trans_a, trans_b), {a, b},
      [a, b, trans_a, trans_b](const Var& g, const std::vector<bool>& need) -> Grads {
        Grads out(2);
        if (!trans_a && !trans_b) {
          if (need[0]) out[0] = matmul(g, b, false, true);
          if (need[1]) out[1] = matmul(a, g, true, false);
        } else if (!trans_a && trans_b) {
          if (need[0]) out[0] = matmul(g, b);
          if (need[1]) out[1] = matmul(g, a, true, false);
        } else if (trans_a && !trans_b) {
          if (need[0]) out[0] = matmul(b, g, false, true);
          if (need[1]) out[1] = matmul(a, g);
        } else {
          if (need[0]) out[0] = matmul(b, g, true, true);
          if (need[1]) out[1] = matmul(g, a, true, true);
        }
        return out;
      });
}

inline Var transpose(const Var& a) {
  const Tensor& x = a.value();
  Tensor t(x.cols(), x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) t(c, r) = x(r, c);
  return a.tape->record("transpose", std::move(t), {a},
                        [](const Var& g, const std::vector<bool>&) -> Grads { return {transpose(g)}; });
}

// Sparse (constant) times dense. The sparse matrix must outlive the tape.
inline Var spmm(const SparseMatrix& s, const Var& d) {
  const SparseMatrix* sp = &s;
  return d.tape->record("spmm", kernels::spmm(s, d.value()), {d},
                        [sp](const Var& g, const std::vector<bool>&) -> Grads { return {spmm(sp->transposed(), g)}; });
}

inline Var pad_cols(const Var& a, std::size_t offset, std::size_t total);

inline Var slice_cols(const Var& a, std::size_t offset, std::size_t width) {
  const Tensor& x = a.value();
  if (offset + width > x.cols()) throw ShapeError("slice_cols out of range on " + x.shape());
  Tensor out(x.rows(), width);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < width; ++c) out(r, c) = x(r, offset + c);
  const std::size_t total = x.cols();
  return a.tape->record("slice_cols", std::move(out), {a}, [offset, total](const Var& g, const std::vector<bool>&) -> Grads {
    return {pad_cols(g, offset, total)};
  });
}

// Places `a` at column `offset` of a zero matrix `total` columns wide.
inline Var pad_cols(const Var& a, std::size_t offset, std::size_t total) {
  const Tensor& x = a.value();
  if (offset + x.cols() > total) throw ShapeError("pad_cols out of range");
  Tensor out(x.rows(), total);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, offset + c) = x(r, c);
  const std::size_t width = x.cols();
  return a.tape->record("pad_cols", std::move(out), {a}, [offset, width](const Var& g, const std::vector<bool>&) -> Grads {
    return {slice_cols(g, offset, width)};
  });
}

// Feature-axis concatenation; backward splits by the recorded widths.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols row mismatch " + p.value().shape());
    total += p.cols();
  }
  Tensor out(rows, total);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Tensor& x = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) out(r, off + c) = x(r, c);
    off += x.cols();
  }
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.cols());
  return parts.front().tape->record("concat_cols", std::move(out), parts,
                                    [offsets, widths](const Var& g, const std::vector<bool>& need) -> Grads {
                                      Grads out(offsets.size());
                                      for (std::size_t j = 0; j < offsets.size(); ++j)
                                        if (need[j]) out[j] = slice_cols(g, offsets[j], widths[j]);
                                      return out;
                                    });
}

inline Var scatter_rows(const Var& a, const std::vector<std::size_t>& index, std::size_t rows);

// out[j] = a[index[j]]
inline Var gather_rows(const Var& a, const std::vector<std::size_t>& index) {
  const Tensor& x = a.value();
  Tensor out(index.size(), x.cols());
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (index[j] >= x.rows()) throw ShapeError("gather_rows index " + std::to_string(index[j]) + " out of " + x.shape());
    auto src = x.row(index[j]);
    std::copy(src.begin(), src.end(), out.row(j).begin());
  }
  const std::size_t rows = x.rows();
  return a.tape->record("gather_rows", std::move(out), {a}, [index, rows](const Var& g, const std::vector<bool>&) -> Grads {
    return {scatter_rows(g, index, rows)};
  });
}

// out[index[j]] += a[j], out has `rows` rows.
inline Var scatter_rows(const Var& a, const std::vector<std::size_t>& index, std::size_t rows) {
  const Tensor& x = a.value();
  if (index.size() != x.rows()) throw ShapeError("scatter_rows index length mismatch");
  Tensor out(rows, x.cols());
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (index[j] >= rows) throw ShapeError("scatter_rows index out of range");
    auto dst = out.row(index[j]);
    auto src = x.row(j);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
  }
  return a.tape->record("scatter_rows", std::move(out), {a},
                        [index](const Var& g, const std::vector<bool>&) -> Grads { return {gather_rows(g, index)}; });
}

inline Var expand(const Var& s, std::size_t rows, std::size_t cols);

inline Var sum(const Var& a) {
  const std::size_t r = a.rows(), c = a.cols();
  return a.tape->record("sum", Tensor::scalar(a.value().sum()), {a},
                        [r, c](const Var& g, const std::vector<bool>&) -> Grads { return {expand(g, r, c)}; });
}

// Broadcast a 1x1 tensor to rows x cols.
inline Var expand(const Var& s, std::size_t rows, std::size_t cols) {
  detail::require_scalar("expand", s.value());
  return s.tape->record("expand", Tensor(rows, cols, s.value().item()), {s},
                        [](const Var& g, const std::vector<bool>&) -> Grads { return {sum(g)}; });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var expand_cols(const Var& v, std::size_t cols);

// Row sums as an n x 1 column.
inline Var rowsum(const Var& a) {
  const Tensor& x = a.value();
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (double v : x.row(r)) s += v;
    out(r, 0) = s;
  }
  const std::size_t cols = x.cols();
  return a.tape->record("rowsum", std::move(out), {a},
                        [cols](const Var& g, const std::vector<bool>&) -> Grads { return {expand_cols(g, cols)}; });
}

// Broadcast an n x 1 column across `cols` columns.
inline Var expand_cols(const Var& v, std::size_t cols) {
  const Tensor& x = v.value();
  if (x.cols() != 1) throw ShapeError("expand_cols expects a column, got " + x.shape());
  Tensor out(x.rows(), cols);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = x(r, 0);
  return v.tape->record("expand_cols", std::move(out), {v},
                        [](const Var& g, const std::vector<bool>&) -> Grads { return {rowsum(g)}; });
}

inline Var expand_rows(const Var& v, std::size_t rows);

inline Var colsum(const Var& a) {
  const Tensor& x = a.value();
  Tensor out(1, x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(0, c) += x(r, c);
  const std::size_t rows = x.rows();
  return a.tape->record("colsum", std::move(out), {a},
                        [rows](const Var& g, const std::vector<bool>&) -> Grads { return {expand_rows(g, rows)}; });
}

// Broadcast a 1 x n row down `rows` rows.
inline Var expand_rows(const Var& v, std::size_t rows) {
  const Tensor& x = v.value();
  if (x.rows() != 1) throw ShapeError("expand_rows expects a row, got " + x.shape());
  Tensor out(rows, x.cols());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(0, c);
  return v.tape->record("expand_rows", std::move(out), {v},
                        [](const Var& g, const std::vector<bool>&) -> Grads { return {colsum(g)}; });
}

// a (n x m) scaled row-wise by v (n x 1).
inline Var mul_rows(const Var& a, const Var& v) { return mul(a, expand_cols(v, a.cols())); }

// a scaled by a 1x1 variable.
inline Var mul_scalar(const Var& a, const Var& s) { return mul(a, expand(s, a.rows(), a.cols())); }

// a (n x m) plus a 1 x m bias row.
inline Var add_row_bias(const Var& a, const Var& b) { return add(a, expand_rows(b, a.rows())); }

inline Var exp(const Var& a) {
  Tensor y = detail::map(a.value(), [](double x) { return std::exp(x); });
  auto& tape = *a.tape;
  // The output id is the next node; the rule uses it as a differentiable value.
  const std::size_t out_id = tape.size();
  return tape.record("exp", std::move(y), {a}, [&tape, out_id](const Var& g, const std::vector<bool>&) -> Grads {
    return {mul(g, Var{&tape, out_id})};
  });
}

inline Var reciprocal(const Var& a) {
  Tensor y = detail::map(a.value(), [](double x) { return 1.0 / x; });
  auto& tape = *a.tape;
  const std::size_t out_id = tape.size();
  return tape.record("reciprocal", std::move(y), {a}, [&tape, out_id](const Var& g, const std::vector<bool>&) -> Grads {
    Var y{&tape, out_id};
    return {neg(mul(g, mul(y, y)))};
  });
}

inline Var log(const Var& a) {
  return a.tape->record("log", detail::map(a.value(), [](double x) { return std::log(x); }), {a},
                        [a](const Var& g, const std::vector<bool>&) -> Grads { return {mul(g, reciprocal(a))}; });
}

inline Var sqrt(const Var& a) {
  Tensor y = detail::map(a.value(), [](double x) { return std::sqrt(x); });
  auto& tape = *a.tape;
  const std::size_t out_id = tape.size();
  return tape.record("sqrt", std::move(y), {a}, [&tape, out_id](const Var& g, const std::vector<bool>&) -> Grads {
    return {scale(mul(g, reciprocal(Var{&tape, out_id})), 0.5)};
  });
}

inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow.
inline double log_sigmoid_value(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline Var sigmoid(const Var& a) {
  Tensor y = detail::map(a.value(), sigmoid_value);
  auto& tape = *a.tape;
  const std::size_t out_id = tape.size();
  return tape.record("sigmoid", std::move(y), {a}, [&tape, out_id](const Var& g, const std::vector<bool>&) -> Grads {
    Var y{&tape, out_id};
    return {mul(g, mul(y, add_scalar(neg(y), 1.0)))};
  });
}

inline Var log_sigmoid(const Var& a) {
  return a.tape->record("log_sigmoid", detail::map(a.value(), log_sigmoid_value), {a},
                        [a](const Var& g, const std::vector<bool>&) -> Grads { return {mul(g, sigmoid(neg(a)))}; });
}

// Row-wise log(sum(exp(.))) as an n x 1 column.
inline Var logsumexp_rows(const Var& a) {
  const Tensor& x = a.value();
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    double m = -std::numeric_limits<double>::infinity();
    for (double v : row) m = std::max(m, v);
    double s = 0.0;
    for (double v : row) s += std::exp(v - m);
    out(r, 0) = m + std::log(s);
  }
  auto& tape = *a.tape;
  const std::size_t out_id = tape.size();
  return tape.record("logsumexp_rows", std::move(out), {a}, [a, &tape, out_id](const Var& g, const std::vector<bool>&) -> Grads {
    const std::size_t cols = a.cols();
    Var softmax = exp(sub(a, expand_cols(Var{&tape, out_id}, cols)));
    return {mul(expand_cols(g, cols), softmax)};
  });
}

// x where x >= 0, slope * x elsewhere. `slope` is a learnable 1x1.
inline Var prelu(const Var& x, const Var& slope) {
  detail::require_scalar("prelu slope", slope.value());
  const Tensor& xv = x.value();
  const double s = slope.value().item();
  Tensor out = detail::map(xv, [s](double v) { return v >= 0.0 ? v : s * v; });
  return x.tape->record("prelu", std::move(out), {x, slope}, [x, slope](const Var& g, const std::vector<bool>& need) -> Grads {
    // Region masks are rebuilt from the recorded input to keep the tape small.
    const Tensor pos = detail::map(x.value(), [](double v) { return v >= 0.0 ? 1.0 : 0.0; });
    const Tensor negm = detail::map(x.value(), [](double v) { return v >= 0.0 ? 0.0 : 1.0; });
    Grads out(2);
    if (need[0]) out[0] = add(mul_const(g, pos), mul_scalar(mul_const(g, negm), slope));
    if (need[1]) out[1] = sum(mul_const(mul(x, g), negm));
    return out;
  });
}

// Inverted dropout: in training mode, zero each entry with probability p and
// scale survivors by 1/(1-p); identity otherwise.
template <class Rng>
Var dropout(const Var& a, double p, bool training, Rng& rng) {
  if (!training || p <= 0.0) return a;
  if (p >= 1.0) throw ContractError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  Tensor mask(a.rows(), a.cols());
  const double s = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? s : 0.0;
  return mul_const(a, mask);
}

// Rows scaled to unit L2 norm; eps keeps all-zero rows finite.
inline Var normalize_rows(const Var& a, double eps = 1e-16) {
  return mul_rows(a, reciprocal(sqrt(add_scalar(rowsum(mul(a, a)), eps))));
}

// Row-wise cosine similarity of two equally shaped tables, n x 1.
inline Var cosine_similarity(const Var& a, const Var& b) {
  return rowsum(mul(normalize_rows(a), normalize_rows(b)));
}

// Row-wise inner product, n x 1.
inline Var row_dot(const Var& a, const Var& b) { return rowsum(mul(a, b)); }

inline Var squared_norm(const Var& a) { return sum(mul(a, a)); }

}  // namespace cml::ad
