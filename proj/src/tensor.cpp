#include "tfdecomp/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tfdecomp/error.hpp"
#include "tfdecomp/kernels.hpp"

namespace tfdecomp {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("Matrix: " + std::to_string(data_.size()) + " values do not fill " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer list");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Vector Matrix::row_vector(std::size_t r) const {
  auto v = row(r);
  return {v.begin(), v.end()};
}

void Matrix::set_row(std::size_t r, std::span<const double> values) {
  if (values.size() != cols_) {
    throw ShapeError("set_row: expected " + std::to_string(cols_) + " values, got " +
                     std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), row(r).begin());
}

Matrix Matrix::col_slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > cols_) {
    throw IndexError("col_slice: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + shape_string());
  }
  Matrix out(rows_, end - begin);
  for (std::size_t r = 0; r < rows_; ++r) {
    std::copy(data_.begin() + r * cols_ + begin, data_.begin() + r * cols_ + end, out.row(r).begin());
  }
  return out;
}

Matrix Matrix::transposed() const {
  Matrix out(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
  return out;
}

bool Matrix::all_finite() const { return tfdecomp::all_finite(data_); }

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu" || name == "gelu_exact") return Activation::gelu;
  if (name == "identity" || name == "linear") return Activation::identity;
  throw ConfigError("unknown activation '" + name + "' (expected relu, gelu or identity)");
}

std::string to_string(Activation kind) {
  switch (kind) {
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    case Activation::identity: return "identity";
  }
  return "identity";
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c;
  kernels::matmul(a, b, c);
  return c;
}

Vector vecmat(std::span<const double> x, const Matrix& m) {
  if (x.size() != m.rows()) {
    throw ShapeError("vecmat: cannot multiply 1x" + std::to_string(x.size()) + " by " + m.shape_string());
  }
  Vector out(m.cols(), 0.0);
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double s = x[k];
    auto r = m.row(k);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += s * r[j];
  }
  return out;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto in = m.row(r);
    auto dst = out.row(r);
    const double hi = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      dst[c] = std::exp(in[c] - hi);
      total += dst[c];
    }
    for (double& v : dst) v /= total;
  }
  return out;
}

double activate(double x, Activation kind) {
  switch (kind) {
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::gelu: return 0.5 * x * std::erfc(-x / std::numbers::sqrt2);
    case Activation::identity: return x;
  }
  return x;
}

Vector activation(std::span<const double> x, Activation kind) {
  Vector out(x.size());
  std::transform(x.begin(), x.end(), out.begin(), [kind](double v) { return activate(v, kind); });
  return out;
}

LnStats ln_stats(std::span<const double> x, double eps) {
  if (x.empty()) throw ShapeError("ln_stats: empty vector");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  return {mean, std::sqrt(var + eps)};
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: length " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("max_abs_diff: length " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

std::size_t numerical_rank(const Matrix& m, double rel_threshold) {
  if (m.empty()) return 0;
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> view(
      m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
  Eigen::BDCSVD<Eigen::MatrixXd> svd(view);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  const double cutoff = rel_threshold * sv(0);
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > cutoff) ++rank;
  return rank;
}

}  // namespace tfdecomp
