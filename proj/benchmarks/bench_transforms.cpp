#include <benchmark/benchmark.h>

#include "reqvae/transforms.hpp"

using namespace reqvae;

static void BM_ApplyExactTransform(benchmark::State& state) {
    Rng rng(1);
    Tensor img = Tensor::rand_uniform({3, 64, 64}, rng, -1.0, 1.0);
    const TransformSpec t = TransformSpec::rot90(1);
    for (auto _ : state) {
        benchmark::DoNotOptimize(apply_to_image(img, t).data());
    }
}
BENCHMARK(BM_ApplyExactTransform);

static void BM_ApplyRescale(benchmark::State& state) {
    Rng rng(2);
    Tensor img = Tensor::rand_uniform({3, 64, 64}, rng, -1.0, 1.0);
    const TransformSpec t = TransformSpec::rescale(0.5);
    for (auto _ : state) {
        benchmark::DoNotOptimize(apply_to_image(img, t).data());
    }
}
BENCHMARK(BM_ApplyRescale);

static void BM_LatentVarTransform(benchmark::State& state) {
    Rng rng(3);
    ad::Var z = ad::leaf(Tensor::randn({1, 16, 8, 8}, rng));
    const TransformSpec t = TransformSpec::shift(16, -16);
    for (auto _ : state) {
        ad::Var out = apply_to_latent_var(z, t, 8);
        ad::backward(ad::sum_all(out));
        z->grad = Tensor();
        z->grad_ready = false;
        benchmark::DoNotOptimize(out->value.data());
    }
}
BENCHMARK(BM_LatentVarTransform);
