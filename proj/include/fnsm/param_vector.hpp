#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "fnsm/errors.hpp"

namespace fnsm {

// Flat parameter vector: model weights, momenta, deltas.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t d, double fill = 0.0) : v_(d, fill) {}
  ParamVector(std::initializer_list<double> init) : v_(init) {}
  explicit ParamVector(std::vector<double> values) : v_(std::move(values)) {}

  std::size_t dim() const noexcept { return v_.size(); }
  double& operator[](std::size_t i) noexcept { return v_[i]; }
  double operator[](std::size_t i) const noexcept { return v_[i]; }

  std::span<double> values() noexcept { return v_; }
  std::span<const double> values() const noexcept { return v_; }
  const std::vector<double>& raw() const noexcept { return v_; }

  auto begin() noexcept { return v_.begin(); }
  auto end() noexcept { return v_.end(); }
  auto begin() const noexcept { return v_.begin(); }
  auto end() const noexcept { return v_.end(); }

  ParamVector& operator+=(const ParamVector& o) {
    check_dim(o);
    for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
    return *this;
  }
  ParamVector& operator-=(const ParamVector& o) {
    check_dim(o);
    for (std::size_t i = 0; i < v_.size(); ++i) v_[i] -= o.v_[i];
    return *this;
  }
  ParamVector& operator*=(double s) noexcept {
    for (double& x : v_) x *= s;
    return *this;
  }

  // this += a * x
  ParamVector& axpy(double a, const ParamVector& x) {
    check_dim(x);
    for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += a * x.v_[i];
    return *this;
  }

  double dot(const ParamVector& o) const {
    check_dim(o);
    double s = 0.0;
    for (std::size_t i = 0; i < v_.size(); ++i) s += v_[i] * o.v_[i];
    return s;
  }

  double squared_norm() const noexcept {
    double s = 0.0;
    for (double x : v_) s += x * x;
    return s;
  }

  double norm() const noexcept { return std::sqrt(squared_norm()); }

  bool all_finite() const noexcept {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  bool operator==(const ParamVector& o) const noexcept { return v_ == o.v_; }

 private:
  void check_dim(const ParamVector& o) const {
    require(o.v_.size() == v_.size(), "ParamVector dimension mismatch");
  }

  std::vector<double> v_;
};

inline ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
inline ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
inline ParamVector operator*(double s, ParamVector a) { return a *= s; }
inline ParamVector operator*(ParamVector a, double s) { return a *= s; }

// Row-major dense matrix, used for quadratic curvature.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), a_(rows * cols, fill) {}
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      require(r.size() == cols_, "ragged matrix initializer");
      a_.insert(a_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix diagonal(std::initializer_list<double> d) {
    Matrix m(d.size(), d.size());
    std::size_t i = 0;
    for (double x : d) {
      m(i, i) = x;
      ++i;
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double& operator()(std::size_t r, std::size_t c) noexcept { return a_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return a_[r * cols_ + c]; }

  ParamVector operator*(const ParamVector& x) const {
    require(x.dim() == cols_, "matrix-vector dimension mismatch");
    ParamVector y(rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols_; ++c) s += a_[r * cols_ + c] * x[c];
      y[r] = s;
    }
    return y;
  }

  Matrix& operator+=(const Matrix& o) {
    require(o.rows_ == rows_ && o.cols_ == cols_, "matrix dimension mismatch");
    for (std::size_t i = 0; i < a_.size(); ++i) a_[i] += o.a_[i];
    return *this;
  }

  bool is_symmetric(double tol = 1e-12) const noexcept {
    if (rows_ != cols_) return false;
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = r + 1; c < cols_; ++c)
        if (std::abs((*this)(r, c) - (*this)(c, r)) > tol * (1.0 + std::abs((*this)(r, c))))
          return false;
    return true;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> a_;
};

// Lower Cholesky factor of an SPD matrix. Throws ContractViolation if the
// matrix is not symmetric positive definite.
inline Matrix cholesky(const Matrix& a) {
  require(a.is_symmetric(), "matrix is not symmetric");
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    require(d > 0.0 && std::isfinite(d), "matrix is not positive definite");
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

// Solves L L^T x = b given the lower factor.
inline ParamVector cholesky_solve(const Matrix& l, const ParamVector& b) {
  const std::size_t n = l.rows();
  require(b.dim() == n, "cholesky_solve dimension mismatch");
  ParamVector y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  ParamVector x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = y[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
    x[i] = s / l(i, i);
  }
  return x;
}

}  // namespace fnsm
