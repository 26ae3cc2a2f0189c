#include <benchmark/benchmark.h>

#include "reqvae/autoencoder.hpp"
#include "reqvae/teacher.hpp"

using namespace reqvae;

namespace {

EncoderConfig cfg_for(int64_t width) {
    EncoderConfig cfg;
    cfg.down_factor = 16;
    cfg.latent_channels = 16;
    cfg.base_width = width;
    return cfg;
}

}  // namespace

static void BM_EncodeForward(benchmark::State& state) {
    Autoencoder model(cfg_for(state.range(0)), 1);
    Rng rng(2);
    Tensor img = Tensor::rand_uniform({1, 3, 64, 64}, rng, -1.0, 1.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(model.encode_mean(img).data());
    }
}
BENCHMARK(BM_EncodeForward)->Arg(16)->Arg(32);

static void BM_EncodeDecodeBackward(benchmark::State& state) {
    Autoencoder model(cfg_for(state.range(0)), 1);
    Rng rng(3);
    Tensor img = Tensor::rand_uniform({1, 3, 64, 64}, rng, -1.0, 1.0);
    for (auto _ : state) {
        model.params().zero_grad();
        ad::Var x = ad::constant(img);
        LatentDistribution dist = model.encode(x);
        ad::Var loss = ad::mse_loss(model.decode(dist.mean), x);
        ad::backward(loss);
        benchmark::DoNotOptimize(loss->value.data());
    }
}
BENCHMARK(BM_EncodeDecodeBackward)->Arg(16)->Arg(32);

static void BM_TeacherExtract(benchmark::State& state) {
    auto teacher = make_builtin_teacher(7);
    Rng rng(4);
    Tensor img = Tensor::rand_uniform({1, 3, 64, 64}, rng, -1.0, 1.0);
    for (auto _ : state) {
        benchmark::DoNotOptimize(teacher->extract_plain(img, {"x"}).data());
    }
}
BENCHMARK(BM_TeacherExtract);
