// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices and the handful of kernels the conversion and
// forward paths need. Conversion math runs on Matrix<double>, forward passes
// on Matrix<float>.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "mlaforge/error.hpp"

namespace mlaforge {

enum class DType { f32, f64, u32 };

const char* to_string(DType dtype);
DType parse_dtype(const std::string& name);
std::size_t dtype_size(DType dtype);

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::f32;
};
template <>
struct dtype_of<double> {
  static constexpr DType value = DType::f64;
};
template <>
struct dtype_of<std::uint32_t> {
  static constexpr DType value = DType::u32;
};

template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, T{}) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error(ErrorCode::shape, "matrix data length " + std::to_string(data_.size()) +
                                        " does not match " + std::to_string(rows_) + "x" +
                                        std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      if (row.size() != cols_) throw Error(ErrorCode::shape, "ragged matrix literal");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  const std::vector<T>& storage() const { return data_; }

  template <typename U>
  Matrix<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Matrix<U>(rows_, cols_, std::move(out));
  }

  // Appends the rows of `other`; column counts must agree unless this is empty.
  void append_rows(const Matrix& other) {
    if (rows_ == 0 && data_.empty()) cols_ = other.cols_;
    if (other.cols_ != cols_) throw Error(ErrorCode::shape, "append_rows column mismatch");
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    rows_ += other.rows_;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using MatrixD = Matrix<double>;
using MatrixF = Matrix<float>;

inline std::string shape_string(std::size_t rows, std::size_t cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

// Standard product with a fixed i-k-j loop nest: each output element is
// accumulated over k in ascending order, independent of the row count.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::shape, "matmul: " + shape_string(a.rows(), a.cols()) + " x " +
                                      shape_string(b.rows(), b.cols()));
  }
  Matrix<T> c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* out = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      const T* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

template <typename T>
Matrix<T> hcat(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) throw Error(ErrorCode::shape, "hcat row mismatch");
  Matrix<T> c(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::copy(a.row(i).begin(), a.row(i).end(), c.row(i).begin());
    std::copy(b.row(i).begin(), b.row(i).end(), c.row(i).begin() + a.cols());
  }
  return c;
}

template <typename T>
Matrix<T> column_slice(const Matrix<T>& a, std::size_t first, std::size_t count) {
  if (first + count > a.cols()) throw Error(ErrorCode::shape, "column_slice out of range");
  Matrix<T> c(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i)
    std::copy_n(a.row(i).begin() + first, count, c.row(i).begin());
  return c;
}

template <typename T>
Matrix<T> row_slice(const Matrix<T>& a, std::size_t first, std::size_t count) {
  if (first + count > a.rows()) throw Error(ErrorCode::shape, "row_slice out of range");
  std::vector<T> data(a.values().begin() + first * a.cols(),
                      a.values().begin() + (first + count) * a.cols());
  return Matrix<T>(count, a.cols(), std::move(data));
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc{};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// In-place softmax with max subtraction.
template <typename T>
void softmax_inplace(std::span<T> x) {
  if (x.empty()) return;
  const T mx = *std::max_element(x.begin(), x.end());
  T sum{};
  for (auto& v : x) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : x) v /= sum;
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& a) {
  Matrix<T> out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
  return out;
}

template <typename T>
double frobenius_sq(const Matrix<T>& a) {
  double acc = 0.0;
  for (T v : a.values()) acc += static_cast<double>(v) * static_cast<double>(v);
  return acc;
}

template <typename T>
double frobenius_norm(const Matrix<T>& a) {
  return std::sqrt(frobenius_sq(a));
}

template <typename T>
double max_abs(const Matrix<T>& a) {
  double m = 0.0;
  for (T v : a.values()) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <typename T>
double max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(ErrorCode::shape, "max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.values()[i]) - static_cast<double>(b.values()[i])));
  return m;
}

template <typename T>
bool all_finite(const Matrix<T>& a) {
  if constexpr (std::is_floating_point_v<T>) {
    return std::all_of(a.values().begin(), a.values().end(), [](T v) { return std::isfinite(v); });
  } else {
    return true;
  }
}

struct SvdResult {
  MatrixD u;                  // m x t, orthonormal columns
  std::vector<double> sigma;  // length t, non-increasing
  MatrixD vt;                 // t x n, orthonormal rows
  double discarded_sq_sum = 0.0;
  std::vector<double> full_sigma;  // every singular value, min(m, n) of them
  int sweeps = 0;
};

struct SvdOptions {
  double tolerance = 1e-12;
  int max_sweeps = 60;
};

// Thin SVD truncated to rank t via one-sided cyclic Jacobi. Each column of u
// has its largest-magnitude entry made nonnegative.
SvdResult thin_svd(const MatrixD& a, std::size_t t, const SvdOptions& options = {});

// u * diag(sigma) * vt
MatrixD reconstruct(const SvdResult& svd);

}  // namespace mlaforge
