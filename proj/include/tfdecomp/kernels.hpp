#pragma once

// Hot loops in two flavours: OpenMP-parallel kernels used by the engine, and a
// plain serial reference kept for tests and the benchmark. Both must produce
// bit-identical results for the same inputs (each output row is reduced in the
// same order by exactly one thread).

#include <span>

#include "tfdecomp/tensor.hpp"

namespace tfdecomp {

namespace kernels {

/// c = a * b, rows of c distributed over OpenMP threads.
void matmul(const Matrix& a, const Matrix& b, Matrix& c);

/// out[r] = sum_c weights(r, c) * values.row(c), rows distributed over threads.
void weighted_rows(const Matrix& weights, const Matrix& values, Matrix& out);

}  // namespace kernels

namespace reference {

/// Textbook i-j-k triple loop.
void matmul(const Matrix& a, const Matrix& b, Matrix& c);

void weighted_rows(const Matrix& weights, const Matrix& values, Matrix& out);

}  // namespace reference

/// Worker cap for OpenMP regions: TFDECOMP_THREADS when set, otherwise the
/// OpenMP default.
int thread_count();
void set_thread_count(int n);

}  // namespace tfdecomp
