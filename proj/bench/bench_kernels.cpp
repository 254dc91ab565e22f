// Parallel kernels against their serial references, plus the corpus-level
// importance pass at one thread and at the default thread count.

#include <benchmark/benchmark.h>

#include <random>

#include "tfdecomp/analysis.hpp"
#include "tfdecomp/kernels.hpp"
#include "tfdecomp/toy.hpp"

namespace {

using namespace tfdecomp;

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Matrix m(rows, cols);
  for (double& v : m.data()) v = n(rng);
  return m;
}

template <void (*Fn)(const Matrix&, const Matrix&, Matrix&)>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  Matrix c;
  for (auto _ : state) {
    Fn(a, b, c);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul<kernels::matmul>)->Name("matmul/parallel")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Matmul<reference::matmul>)->Name("matmul/serial")->Arg(64)->Arg(128)->Arg(256);

template <void (*Fn)(const Matrix&, const Matrix&, Matrix&)>
void BM_WeightedRows(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix w = random_matrix(n, n, 3), v = random_matrix(n, 64, 4);
  Matrix out;
  for (auto _ : state) {
    Fn(w, v, out);
    benchmark::DoNotOptimize(out.data().data());
  }
}
BENCHMARK(BM_WeightedRows<kernels::weighted_rows>)->Name("weighted_rows/parallel")->Arg(128)->Arg(512);
BENCHMARK(BM_WeightedRows<reference::weighted_rows>)->Name("weighted_rows/serial")->Arg(128)->Arg(512);

void BM_ImportanceProfile(benchmark::State& state) {
  ModelConfig c;
  c.layers = 4;
  c.dim = 64;
  c.heads = 4;
  c.ff_dim = 256;
  c.vocab = 100;
  c.max_pos = 64;
  const auto params = random_model(c, 5);
  const auto corpus = random_corpus(c, 32, 16, 48, 6);
  const int saved = thread_count();
  if (state.range(0) == 1) set_thread_count(1);
  for (auto _ : state) benchmark::DoNotOptimize(importance_profile(params, c, corpus).tokens);
  set_thread_count(saved);
  state.SetLabel(state.range(0) == 1 ? "1 thread" : std::to_string(thread_count()) + " threads");
}
BENCHMARK(BM_ImportanceProfile)->Name("importance_profile/serial")->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ImportanceProfile)->Name("importance_profile/parallel")->Arg(0)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
