#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "sphere_attn/errors.hpp"

namespace sphere_attn {

/// Row-major dense matrix. Production paths use float, verification paths
/// use double.
template <typename T>
class DenseMatrix {
 public:
  using value_type = T;

  DenseMatrix() = default;

  DenseMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("DenseMatrix: data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  static DenseMatrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("DenseMatrix::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return DenseMatrix(r, c, std::move(data));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& values() const { return data_; }

  template <typename U>
  DenseMatrix<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return DenseMatrix<U>(rows_, cols_, std::move(out));
  }

  bool operator==(const DenseMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// Dense rank-3 array, row-major over (d0, d1, d2). Used for h x n x d head
/// tensors and h x n x n bias / probability blocks.
template <typename T>
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(std::size_t d0, std::size_t d1, std::size_t d2, T fill = T{0})
      : dims_{d0, d1, d2}, data_(d0 * d1 * d2, fill) {}

  std::size_t dim(int axis) const { return dims_[static_cast<std::size_t>(axis)]; }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

 private:
  std::array<std::size_t, 3> dims_{0, 0, 0};
  std::vector<T> data_;
};

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
bool all_finite(const DenseMatrix<T>& m) {
  return all_finite(m.data());
}

template <typename T>
T max_abs_difference(const DenseMatrix<T>& a, const DenseMatrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("max_abs_difference: shape mismatch");
  }
  T worst{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  }
  return worst;
}

/// a * b.
template <typename T>
DenseMatrix<T> matmul(const DenseMatrix<T>& a, const DenseMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  DenseMatrix<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      if (aik == T{0}) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

/// aᵀ * b, without materializing the transpose.
template <typename T>
DenseMatrix<T> matmul_at_b(const DenseMatrix<T>& a, const DenseMatrix<T>& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_at_b: row counts differ");
  DenseMatrix<T> out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto a_row = a.row(k);
    auto b_row = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T aki = a_row[i];
      if (aki == T{0}) continue;
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aki * b_row[j];
    }
  }
  return out;
}

/// a * bᵀ.
template <typename T>
DenseMatrix<T> matmul_a_bt(const DenseMatrix<T>& a, const DenseMatrix<T>& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_a_bt: column counts differ");
  DenseMatrix<T> out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto b_row = b.row(j);
      T acc{0};
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  return out;
}

/// In-place softmax of one row, stabilized by subtracting the row maximum.
template <typename T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  const T peak = *std::max_element(row.begin(), row.end());
  // Long float rows drift past 1e-6 with a float accumulator.
  double total = 0.0;
  for (T& v : row) {
    v = std::exp(v - peak);
    total += static_cast<double>(v);
  }
  for (T& v : row) v = static_cast<T>(static_cast<double>(v) / total);
}

template <typename T>
DenseMatrix<T> row_softmax(const DenseMatrix<T>& m) {
  DenseMatrix<T> out = m;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
  return out;
}

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central-difference gradient of `f` at `x`. Throws NumericError when any
/// evaluation is non-finite.
std::vector<double> finite_difference_gradient(const ScalarFunction& f,
                                               std::span<const double> x, double eps);

}  // namespace sphere_attn
