// Copyright 2026 The adaptwin Authors
// SPDX-License-Identifier: Apache-2.0

// Serial reference kernels against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include <random>

#include "adaptwin/finetune.hpp"
#include "adaptwin/kernels.hpp"
#include "adaptwin/linalg.hpp"
#include "adaptwin/quant.hpp"
#include "adaptwin/toy.hpp"

using namespace adaptwin;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    Matrix m(rows, cols);
    for (auto& v : m.values()) {
        v = nd(rng);
    }
    return m;
}

template <void (*Gemm)(const Matrix&, const Matrix&, Matrix&)>
void BM_gemm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
    Matrix c(n, n);
    for (auto _ : state) {
        Gemm(a, b, c);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_gemm<kernels::serial::gemm_nn>)->Name("gemm_nn/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_gemm<kernels::omp::gemm_nn>)->Name("gemm_nn/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_gemm<kernels::serial::gemm_nt>)->Name("gemm_nt/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_gemm<kernels::omp::gemm_nt>)->Name("gemm_nt/omp")->Arg(64)->Arg(256);

void BM_svd(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix m = random_matrix(n, n, 3);
    SvdOptions opts;
    opts.parallel = state.range(1) != 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(svd(m, opts));
    }
}
BENCHMARK(BM_svd)->ArgNames({"n", "omp"})->Args({64, 0})->Args({64, 1})->Args({256, 0})->Args({256, 1});

void BM_quantize(benchmark::State& state) {
    const Matrix m = random_matrix(static_cast<std::size_t>(state.range(0)), 256, 4);
    for (auto _ : state) {
        benchmark::DoNotOptimize(fake_quantize(m));
    }
    state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(m.size() * sizeof(double)));
}
BENCHMARK(BM_quantize)->Arg(256)->Arg(4096);

void BM_objective_gradient(benchmark::State& state) {
    const ModelDims dims;
    const Model m = gen_toy(dims, {}, 5, false, 1.0);
    const HiddenStatePairSet pairs = capture_hidden_states(m, sample_sequences(narrow_distribution(dims), 32, 6), 0);
    const CompressedLayerParams p =
        compress_layer(m.layers[0], dims, m.config, make_plan(dims, 0.5), {InitStrategy::Svd, 7, 0.0});
    const bool parallel = state.range(0) != 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(objective_gradient(p, pairs, m.config, {}, parallel).loss);
    }
}
BENCHMARK(BM_objective_gradient)->ArgName("omp")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
