#include <benchmark/benchmark.h>

#include "reqvae/metrics.hpp"

using namespace reqvae;

static void BM_Psnr(benchmark::State& state) {
    Rng rng(1);
    Tensor a = Tensor::rand_uniform({3, 64, 64}, rng, -1.0, 1.0);
    Tensor b = Tensor::rand_uniform({3, 64, 64}, rng, -1.0, 1.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(psnr(a, b));
    }
}
BENCHMARK(BM_Psnr);

static void BM_Ssim(benchmark::State& state) {
    Rng rng(2);
    Tensor a = Tensor::rand_uniform({3, 64, 64}, rng, -1.0, 1.0);
    Tensor b = Tensor::rand_uniform({3, 64, 64}, rng, -1.0, 1.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(ssim(a, b));
    }
}
BENCHMARK(BM_Ssim);

static void BM_FrechetFromFeatures(benchmark::State& state) {
    const int64_t n = state.range(0), d = state.range(1);
    Rng rng(3);
    Tensor a = Tensor::randn({n, d}, rng);
    Tensor b = Tensor::randn({n, d}, rng, 1.2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(frechet_from_features(a, b));
    }
}
BENCHMARK(BM_FrechetFromFeatures)->Args({256, 64})->Args({2000, 64});
