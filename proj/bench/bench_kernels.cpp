// Serial reference vs OpenMP kernels on the shapes the fixture networks use.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "mmclip/kernels.hpp"

namespace k = mmclip::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <auto Kernel>
void bm_matmul(benchmark::State& state) {
  // batch x in -> out, as in a dense layer forward pass
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto kk = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const auto a = random_vec(m * kk, 1), b = random_vec(kk * n, 2);
  std::vector<double> out(m * n);
  for (auto _ : state) {
    Kernel(m, kk, n, a, b, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(m * kk * n));
}

template <auto Kernel>
void bm_conv(benchmark::State& state) {
  k::ConvGeometry g{.batch = static_cast<std::size_t>(state.range(0)),
                    .in_channels = 8, .height = 8, .width = 8,
                    .out_channels = 16, .kernel = 3, .padding = 1};
  const auto x = random_vec(g.batch * g.in_channels * g.height * g.width, 3);
  const auto w = random_vec(g.out_channels * g.in_channels * g.kernel * g.kernel, 4);
  std::vector<double> y(g.batch * g.out_channels * g.out_height() * g.out_width());
  for (auto _ : state) {
    Kernel(g, x, w, y);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

#define MATMUL_ARGS ->Args({64, 64, 128})->Args({256, 128, 64})->Args({512, 128, 10})

BENCHMARK(bm_matmul<k::serial::matmul_nn>)->Name("matmul_nn/serial") MATMUL_ARGS;
BENCHMARK(bm_matmul<k::parallel::matmul_nn>)->Name("matmul_nn/parallel") MATMUL_ARGS;
BENCHMARK(bm_matmul<k::serial::matmul_nt>)->Name("matmul_nt/serial") MATMUL_ARGS;
BENCHMARK(bm_matmul<k::parallel::matmul_nt>)->Name("matmul_nt/parallel") MATMUL_ARGS;
BENCHMARK(bm_matmul<k::serial::matmul_tn>)->Name("matmul_tn/serial") MATMUL_ARGS;
BENCHMARK(bm_matmul<k::parallel::matmul_tn>)->Name("matmul_tn/parallel") MATMUL_ARGS;
BENCHMARK(bm_conv<k::serial::conv2d_forward>)->Name("conv2d_forward/serial")->Arg(64);
BENCHMARK(bm_conv<k::parallel::conv2d_forward>)->Name("conv2d_forward/parallel")->Arg(64);

BENCHMARK_MAIN();
