#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "cml/core/errors.hpp"

namespace cml {

// Row-major 2-D array of doubles. Scalars are 1x1, column vectors are n x 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw ShapeError("tensor " + shape_string(rows_, cols_) + " given " +
                       std::to_string(values_.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> vals;
    vals.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      vals.insert(vals.end(), row.begin(), row.end());
    }
    return Tensor(r, c, std::move(vals));
  }
  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool is_scalar() const noexcept { return rows_ == 1 && cols_ == 1; }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double item() const {
    if (!is_scalar()) throw ShapeError("item() on " + shape());
    return values_[0];
  }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }
  std::vector<double>& data() noexcept { return values_; }
  const std::vector<double>& data() const noexcept { return values_; }

  bool same_shape(const Tensor& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape() const { return shape_string(rows_, cols_); }
  static std::string shape_string(std::size_t r, std::size_t c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }
  double sum() const { return std::accumulate(values_.begin(), values_.end(), 0.0); }
  double squared_norm() const {
    return std::inner_product(values_.begin(), values_.end(), values_.begin(), 0.0);
  }
  double max_abs() const {
    double m = 0.0;
    for (double v : values_) m = std::max(m, std::abs(v));
    return m;
  }

  bool operator==(const Tensor&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

// Compressed-row sparse matrix with non-negative values and unique coordinates.
// The transpose is built once and cached, since graph propagation needs both
// directions every step.
class SparseMatrix {
 public:
  struct Entry {
    std::size_t row;
    std::size_t col;
    double value;
  };

  SparseMatrix() = default;
  SparseMatrix(std::size_t rows, std::size_t cols, std::vector<Entry> entries)
      : rows_(rows), cols_(cols), row_ptr_(rows + 1, 0) {
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
      return std::tie(a.row, a.col) < std::tie(b.row, b.col);
    });
    col_idx_.reserve(entries.size());
    values_.reserve(entries.size());
    for (std::size_t n = 0; n < entries.size(); ++n) {
      const auto& e = entries[n];
      if (e.row >= rows || e.col >= cols) {
        throw ShapeError("sparse entry (" + std::to_string(e.row) + "," + std::to_string(e.col) +
                         ") outside " + Tensor::shape_string(rows, cols));
      }
      if (n > 0 && entries[n - 1].row == e.row && entries[n - 1].col == e.col) {
        throw ContractError("duplicate sparse coordinate (" + std::to_string(e.row) + "," +
                            std::to_string(e.col) + ")");
      }
      if (!(e.value >= 0.0)) throw ContractError("sparse adjacency values must be non-negative");
      ++row_ptr_[e.row + 1];
      col_idx_.push_back(e.col);
      values_.push_back(e.value);
    }
    std::partial_sum(row_ptr_.begin(), row_ptr_.end(), row_ptr_.begin());
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t nnz() const noexcept { return values_.size(); }
  std::size_t row_nnz(std::size_t r) const { return row_ptr_[r + 1] - row_ptr_[r]; }
  std::span<const std::size_t> row_cols(std::size_t r) const {
    return {col_idx_.data() + row_ptr_[r], row_nnz(r)};
  }
  std::span<const double> row_values(std::size_t r) const {
    return {values_.data() + row_ptr_[r], row_nnz(r)};
  }

  std::vector<Entry> entries() const {
    std::vector<Entry> out;
    out.reserve(nnz());
    for (std::size_t r = 0; r < rows_; ++r) {
      for (std::size_t p = row_ptr_[r]; p < row_ptr_[r + 1]; ++p) out.push_back({r, col_idx_[p], values_[p]});
    }
    return out;
  }

  const SparseMatrix& transposed() const {
    if (!transpose_) {
      auto es = entries();
      for (auto& e : es) std::swap(e.row, e.col);
      transpose_ = std::make_shared<SparseMatrix>(cols_, rows_, std::move(es));
    }
    return *transpose_;
  }

  Tensor densify() const {
    Tensor t(rows_, cols_);
    for (std::size_t r = 0; r < rows_; ++r) {
      for (std::size_t p = row_ptr_[r]; p < row_ptr_[r + 1]; ++p) t(r, col_idx_[p]) = values_[p];
    }
    return t;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::size_t> row_ptr_{0};
  std::vector<std::size_t> col_idx_;
  std::vector<double> values_;
  mutable std::shared_ptr<const SparseMatrix> transpose_;
};

namespace kernels {

// C = op(A) * op(B), where op transposes when the matching flag is set.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (k != kb) {
    throw ShapeError("matmul inner dimension mismatch: " + a.shape() + (trans_a ? "^T" : "") + " x " +
                     b.shape() + (trans_b ? "^T" : ""));
  }
  Tensor c(m, n);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();
  const std::size_t lda = a.cols(), ldb = b.cols();
  if (!trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? A[p * lda + i] : A[i * lda + p];
        if (av == 0.0) continue;
        const double* brow = B + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = B + j * ldb;
        double s = 0.0;
        if (trans_a) {
          for (std::size_t p = 0; p < k; ++p) s += A[p * lda + i] * brow[p];
        } else {
          const double* arow = A + i * lda;
          for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        }
        C[i * n + j] = s;
      }
    }
  }
  return c;
}

inline Tensor spmm(const SparseMatrix& s, const Tensor& d) {
  if (s.cols() != d.rows()) {
    throw ShapeError("spmm dimension mismatch: sparse " + Tensor::shape_string(s.rows(), s.cols()) +
                     " x " + d.shape());
  }
  Tensor out(s.rows(), d.cols());
  const std::size_t n = d.cols();
  for (std::size_t r = 0; r < s.rows(); ++r) {
    auto cols = s.row_cols(r);
    auto vals = s.row_values(r);
    double* orow = out.data().data() + r * n;
    for (std::size_t p = 0; p < cols.size(); ++p) {
      const double* drow = d.data().data() + cols[p] * n;
      const double v = vals[p];
      for (std::size_t j = 0; j < n; ++j) orow[j] += v * drow[j];
    }
  }
  return out;
}

}  // namespace kernels
}  // namespace cml
