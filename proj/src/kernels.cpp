#include "tfdecomp/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <string>

#include "tfdecomp/error.hpp"

namespace tfdecomp {

namespace {

// Below this many multiply-adds the fork/join costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

void check_matmul_shapes(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape_string() + " by " + b.shape_string());
  }
}

int initial_thread_count() {
  int n = omp_get_max_threads();
  if (const char* env = std::getenv("TFDECOMP_THREADS")) {
    try {
      int requested = std::stoi(env);
      if (requested > 0) n = std::min(n, requested);
    } catch (const std::exception&) {
      // unparsable value: keep the default
    }
  }
  return std::max(1, n);
}

int g_threads = initial_thread_count();

}  // namespace

int thread_count() { return g_threads; }

void set_thread_count(int n) { g_threads = std::max(1, n); }

namespace kernels {

void matmul(const Matrix& a, const Matrix& b, Matrix& c) {
  check_matmul_shapes(a, b);
  c = Matrix(a.rows(), b.cols());
  const std::size_t n = a.rows();
  const std::size_t inner = a.cols();
  const std::size_t m = b.cols();
  const bool parallel = n > 1 && n * inner * m >= kParallelWork;

#pragma omp parallel for schedule(static) num_threads(thread_count()) if (parallel)
  for (std::size_t i = 0; i < n; ++i) {
    auto out = c.row(i);
    auto lhs = a.row(i);
    for (std::size_t k = 0; k < inner; ++k) {
      const double s = lhs[k];
      auto rhs = b.row(k);
      for (std::size_t j = 0; j < m; ++j) out[j] += s * rhs[j];
    }
  }
}

void weighted_rows(const Matrix& weights, const Matrix& values, Matrix& out) {
  check_matmul_shapes(weights, values);
  out = Matrix(weights.rows(), values.cols());
  const std::size_t n = weights.rows();
  const bool parallel = n > 1 && n * weights.cols() * values.cols() >= kParallelWork;

#pragma omp parallel for schedule(static) num_threads(thread_count()) if (parallel)
  for (std::size_t r = 0; r < n; ++r) {
    auto dst = out.row(r);
    for (std::size_t k = 0; k < weights.cols(); ++k) {
      const double w = weights(r, k);
      auto src = values.row(k);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += w * src[j];
    }
  }
}

}  // namespace kernels

namespace reference {

void matmul(const Matrix& a, const Matrix& b, Matrix& c) {
  check_matmul_shapes(a, b);
  c = Matrix(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  }
}

void weighted_rows(const Matrix& weights, const Matrix& values, Matrix& out) {
  check_matmul_shapes(weights, values);
  out = Matrix(weights.rows(), values.cols());
  for (std::size_t r = 0; r < weights.rows(); ++r) {
    for (std::size_t k = 0; k < weights.cols(); ++k) {
      for (std::size_t j = 0; j < values.cols(); ++j) out(r, j) += weights(r, k) * values(k, j);
    }
  }
}

}  // namespace reference

}  // namespace tfdecomp
