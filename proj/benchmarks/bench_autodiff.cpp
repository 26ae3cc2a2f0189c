#include <benchmark/benchmark.h>

#include "reqvae/autodiff.hpp"
#include "reqvae/rng.hpp"

using namespace reqvae;

static void BM_Conv2dForward(benchmark::State& state) {
    const int64_t c = state.range(0), hw = state.range(1);
    Rng rng(1);
    ad::Var x = ad::constant(Tensor::randn({1, c, hw, hw}, rng));
    ad::Var w = ad::constant(Tensor::randn({c, c, 3, 3}, rng, 0.1));
    ad::Var b = ad::constant(Tensor::zeros({c}));
    for (auto _ : state) {
        benchmark::DoNotOptimize(ad::conv2d(x, w, b, 1, ad::PadMode::circular)->value.data());
    }
    state.SetItemsProcessed(state.iterations() * c * c * hw * hw * 9);
}
BENCHMARK(BM_Conv2dForward)->Args({16, 32})->Args({32, 32})->Args({32, 64});

static void BM_Conv2dBackward(benchmark::State& state) {
    const int64_t c = state.range(0), hw = state.range(1);
    Rng rng(2);
    for (auto _ : state) {
        ad::Var x = ad::leaf(Tensor::randn({1, c, hw, hw}, rng));
        ad::Var w = ad::leaf(Tensor::randn({c, c, 3, 3}, rng, 0.1));
        ad::Var b = ad::leaf(Tensor::zeros({c}));
        ad::Var loss = ad::mean_all(ad::square(ad::conv2d(x, w, b, 1, ad::PadMode::circular)));
        ad::backward(loss);
        benchmark::DoNotOptimize(w->grad.data());
    }
}
BENCHMARK(BM_Conv2dBackward)->Args({16, 32})->Args({32, 32});

static void BM_MatmulForward(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(3);
    ad::Var a = ad::constant(Tensor::randn({n, n}, rng));
    ad::Var b = ad::constant(Tensor::randn({n, n}, rng));
    for (auto _ : state) {
        benchmark::DoNotOptimize(ad::matmul(a, b)->value.data());
    }
    state.SetItemsProcessed(state.iterations() * n * n * n * 2);
}
BENCHMARK(BM_MatmulForward)->Arg(128)->Arg(512);

static void BM_GroupNormForward(benchmark::State& state) {
    Rng rng(4);
    ad::Var x = ad::constant(Tensor::randn({4, 32, 16, 16}, rng));
    ad::Var gamma = ad::constant(Tensor::full({32}, 1.0));
    ad::Var beta = ad::constant(Tensor::zeros({32}));
    for (auto _ : state) {
        benchmark::DoNotOptimize(ad::group_norm(x, gamma, beta, 8)->value.data());
    }
}
BENCHMARK(BM_GroupNormForward);

BENCHMARK_MAIN();
