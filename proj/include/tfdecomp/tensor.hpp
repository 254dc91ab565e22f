#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace tfdecomp {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
///
/// Weights loaded in 32-bit mode are stored here already rounded to float, so
/// every arithmetic path accumulates in 64-bit regardless of the checkpoint dtype.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  Vector row_vector(std::size_t r) const;
  void set_row(std::size_t r, std::span<const double> values);

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  /// Copy of columns [begin, end).
  Matrix col_slice(std::size_t begin, std::size_t end) const;
  Matrix transposed() const;

  bool all_finite() const;
  std::string shape_string() const;

  static Matrix identity(std::size_t n);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

enum class Activation { relu, gelu, identity };

Activation parse_activation(const std::string& name);
std::string to_string(Activation kind);

/// Matrix product a * b, parallel over rows of a.
Matrix matmul(const Matrix& a, const Matrix& b);

/// Row vector times matrix.
Vector vecmat(std::span<const double> x, const Matrix& m);

/// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& m);

Vector activation(std::span<const double> x, Activation kind);
double activate(double x, Activation kind);

struct LnStats {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and sqrt(population variance + eps) of the components of x.
LnStats ln_stats(std::span<const double> x, double eps = 1e-12);

double dot(std::span<const double> a, std::span<const double> b);
double max_abs_diff(std::span<const double> a, std::span<const double> b);
bool all_finite(std::span<const double> x);

/// Number of singular values of m above rel_threshold * sigma_max.
std::size_t numerical_rank(const Matrix& m, double rel_threshold = 1e-8);

}  // namespace tfdecomp
