#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "doctest.h"
#include "reqvae/enhancer.hpp"
#include "reqvae/vae_trainer.hpp"

using namespace reqvae;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const char* tag) {
        path = fs::temp_directory_path() / (std::string("reqvae_enh_") + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::vector<Tensor> toy_frames(int64_t n, int64_t hw, uint64_t seed) {
    std::vector<Tensor> frames;
    for (int64_t i = 0; i < n; ++i) {
        SceneClip clip = generate_scene(seed + static_cast<uint64_t>(i), 1, hw, hw);
        frames.push_back(clip.frames[0]);
    }
    return frames;
}

// Trains nothing: a freshly initialized tiny VAE is enough to exercise the
// enhancer's frozen-model plumbing.
std::string write_tiny_vae(const fs::path& dir, int64_t resolution) {
    TrainConfig tc;
    tc.out_dir = (dir / "vae").string();
    tc.steps = 1;
    tc.batch_size = 1;
    tc.eval_every = 0;
    tc.data.count = 4;
    tc.data.resolution = resolution;
    tc.data.split[0] = 0.75;
    tc.data.split[1] = 0.25;
    tc.data.split[2] = 0.0;
    tc.model.down_factor = 8;
    tc.model.latent_channels = 4;
    tc.model.base_width = 4;
    tc.loss.token_cap = 4;
    TrainResult res = train_vae(tc);
    return res.checkpoint_path;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and identity") {
    NoiseSchedule s = NoiseSchedule::cosine(1000);
    CHECK(s.alpha(1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.sigma(1) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(s.alpha(1000) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(s.sigma(1000) == doctest::Approx(1.0).epsilon(1e-12));
    for (int64_t i = 1; i <= 1000; i += 7) {
        const double a = s.alpha(i), g = s.sigma(i);
        CHECK(std::abs(a * a + g * g - 1.0) <= 1e-12);
    }
    // alpha decreases monotonically.
    for (int64_t i = 1; i < 1000; ++i) CHECK(s.alpha(i) >= s.alpha(i + 1));
    CHECK_THROWS_AS((void)s.alpha(0), std::out_of_range);
    CHECK_THROWS_AS((void)s.alpha(1001), std::out_of_range);
    CHECK_THROWS_AS((void)NoiseSchedule::cosine(1), std::invalid_argument);
}

TEST_CASE("v target endpoints") {
    Rng rng(1);
    Tensor x0 = Tensor::randn({2, 3}, rng);
    Tensor eps = Tensor::randn({2, 3}, rng);
    // Clean end: v = eps. Noise end: v = -x0.
    CHECK(v_target(x0, eps, 1.0, 0.0).bit_equal(eps));
    Tensor vn = v_target(x0, eps, 0.0, 1.0);
    for (int64_t i = 0; i < vn.numel(); ++i) CHECK(vn[i] == -x0[i]);
}

TEST_CASE("v parameterization round-trips x0 and eps") {
    Rng rng(2);
    Tensor x0 = Tensor::randn({4}, rng);
    Tensor eps = Tensor::randn({4}, rng);
    NoiseSchedule s = NoiseSchedule::cosine(50);
    for (int64_t i : {int64_t{2}, int64_t{17}, int64_t{44}}) {
        const double a = s.alpha(i), g = s.sigma(i);
        Tensor v = v_target(x0, eps, a, g);
        for (int64_t k = 0; k < 4; ++k) {
            const double xt = a * x0[k] + g * eps[k];
            const double x0_hat = a * xt - g * v[k];
            const double eps_hat = g * xt + a * v[k];
            CHECK(std::abs(x0_hat - x0[k]) < 1e-6);
            CHECK(std::abs(eps_hat - eps[k]) < 1e-6);
        }
    }
}

TEST_CASE("degrade at severity zero is the identity") {
    auto frames = toy_frames(2, 32, 3);
    CoarseRender r = degrade(frames, 0.0, 9);
    REQUIRE(r.frames.size() == 2);
    CHECK(r.frames[0].bit_equal(frames[0]));
    CHECK(r.frames[1].bit_equal(frames[1]));
    CHECK(r.degradation.blur_sigma == 0.0);
    CHECK_THROWS_AS((void)degrade(frames, 1.5, 9), std::invalid_argument);
}

TEST_CASE("degrade is seed-deterministic and damages the frame") {
    auto frames = toy_frames(1, 32, 4);
    CoarseRender a = degrade(frames, 0.5, 11);
    CoarseRender b = degrade(frames, 0.5, 11);
    CHECK(a.frames[0].bit_equal(b.frames[0]));
    CoarseRender c = degrade(frames, 0.5, 12);
    CHECK_FALSE(a.frames[0].bit_equal(c.frames[0]));
    CHECK_FALSE(a.frames[0].bit_equal(frames[0]));
    CHECK(a.frames[0].min() >= -1.0);
    CHECK(a.frames[0].max() <= 1.0);
    CHECK(a.degradation.blur_sigma == doctest::Approx(1.0));
    CHECK(a.degradation.occlusion == doctest::Approx(0.125));
}

TEST_CASE("occlusion rectangles cover close to the target fraction") {
    // Monte-Carlo over rectangle draws: mean covered area within 0.25 +- 0.05.
    const int64_t h = 64, w = 64;
    double total = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        Rng rng = Rng::derive(100, 0xabc, static_cast<uint64_t>(trial));
        auto rects = sample_occlusions(h, w, 0.25, rng);
        std::vector<uint8_t> covered(static_cast<size_t>(h * w), 0);
        for (const auto& r : rects) {
            CHECK(r[0] >= 0);
            CHECK(r[1] >= 0);
            CHECK(r[0] + r[2] <= h);
            CHECK(r[1] + r[3] <= w);
            for (int64_t y = r[0]; y < r[0] + r[2]; ++y)
                for (int64_t x = r[1]; x < r[1] + r[3]; ++x) covered[static_cast<size_t>(y * w + x)] = 1;
        }
        int64_t on = 0;
        for (uint8_t v : covered) on += v;
        total += static_cast<double>(on) / static_cast<double>(h * w);
    }
    const double mean_cover = total / 100.0;
    CHECK(mean_cover > 0.20);
    CHECK(mean_cover < 0.30);
}

TEST_CASE("render save and load round-trip") {
    TempDir tmp("render");
    CoarseRender r = degrade(toy_frames(2, 32, 5), 0.4, 13);
    const std::string dir = (tmp.path / "r0").string();
    save_render(dir, r);
    CoarseRender back = load_render(dir);
    REQUIRE(back.frames.size() == 2);
    CHECK(back.degradation.occlusion == doctest::Approx(r.degradation.occlusion));
    double worst = 0.0;
    for (int64_t i = 0; i < back.frames[0].numel(); ++i)
        worst = std::max(worst, std::abs(back.frames[0][i] - r.frames[0][i]));
    CHECK(worst <= 1.0 / 255.0 + 1e-12);
}

TEST_CASE("feature head maps frames onto the latent grid") {
    nn::ParamStore ps;
    Rng rng(7);
    FeatureHead head(ps, 16, 8, 6, rng);
    ad::Var x = ad::constant(Tensor::zeros({2, 3, 64, 64}));
    CHECK(head(x)->value.shape() == Shape{2, 6, 4, 4});
    CHECK(ps.numel() > 0);
}

TEST_CASE("denoiser maps noisy latent plus conditioning to v") {
    nn::ParamStore ps;
    Rng rng(8);
    DenoiserUNet unet(ps, 6, 8, rng);
    ad::Var x = ad::constant(Tensor::zeros({1, 12, 4, 4}));
    CHECK(unet(x, 0.3)->value.shape() == Shape{1, 6, 4, 4});
    CHECK_THROWS_AS((void)unet(ad::constant(Tensor::zeros({1, 6, 4, 4})), 0.3), std::invalid_argument);

    // Timestep embedding changes the output.
    Rng rng2(9);
    ad::Var noisy = ad::constant(Tensor::randn({1, 12, 4, 4}, rng2));
    CHECK_FALSE(unet(noisy, 0.1)->value.bit_equal(unet(noisy, 0.9)->value));
}

TEST_CASE("conditioning gradients reach the head from the v loss alone") {
    EnhancerBundle bundle(4, 8, 8, 21);
    Rng rng(10);
    Tensor coarse = Tensor::rand_uniform({1, 3, 16, 16}, rng, -1, 1);
    Tensor noisy = Tensor::randn({1, 4, 2, 2}, rng);
    Tensor vt = Tensor::randn({1, 4, 2, 2}, rng);

    auto head_param = [&] {
        for (const auto& [name, p] : bundle.ps.all())
            if (name.rfind("head.", 0) == 0 && name.find(".w") != std::string::npos) return p;
        throw std::logic_error("no head weight found");
    }();

    // v-prediction loss only.
    bundle.ps.zero_grad();
    ad::Var cond = bundle.head(ad::constant(coarse));
    ad::Var vhat = bundle.unet(ad::concat({ad::constant(noisy), cond}, 1), 0.4);
    ad::backward(ad::mse_loss(vhat, ad::constant(vt)));
    REQUIRE(head_param->grad.numel() == head_param->value.numel());
    CHECK(head_param->grad.abs_max() > 0.0);

    // Latent feature loss only.
    bundle.ps.zero_grad();
    ad::Var cond2 = bundle.head(ad::constant(coarse));
    Tensor gt_latent = Tensor::randn({1, 4, 2, 2}, rng);
    ad::backward(ad::mse_loss(cond2, ad::constant(gt_latent)));
    REQUIRE(head_param->grad.numel() == head_param->value.numel());
    CHECK(head_param->grad.abs_max() > 0.0);
}

TEST_CASE("enhancer checkpoint round-trips with the vae hash") {
    TempDir tmp("ck");
    EnhancerBundle bundle(4, 8, 8, 22);
    bundle.latent_scale = 0.1375;
    EnhancerConfig cfg;
    cfg.out_dir = "x";
    cfg.vae_checkpoint = "vae.rqta";
    cfg.base_width = 8;
    const std::string p = (tmp.path / "enh.rqta").string();
    save_enhancer_checkpoint(p, bundle, cfg.to_json(), 17, 0xdeadbeefcafef00dULL);

    LoadedEnhancer back = load_enhancer_checkpoint(p);
    CHECK(back.step == 17);
    CHECK(back.vae_hash == 0xdeadbeefcafef00dULL);
    CHECK(back.bundle->latent_channels == 4);
    CHECK(back.bundle->down_factor == 8);
    CHECK(back.bundle->latent_scale == 0.1375);
    auto orig = bundle.ps.state();
    auto loaded = back.bundle->ps.state();
    REQUIRE(orig.size() == loaded.size());
    for (const auto& [name, t] : orig) CHECK(t.bit_equal(loaded.at(name)));
}

TEST_CASE("enhance rejects bad arguments and is deterministic") {
    TempDir tmp("enhance");
    const std::string vae_path = write_tiny_vae(tmp.path, 32);
    LoadedVae vae = load_vae_checkpoint(vae_path);
    EnhancerBundle bundle(4, 8, 8, 23);

    auto coarse = toy_frames(2, 32, 6);
    CHECK_THROWS_AS((void)enhance(bundle, vae.bundle->model, coarse, 0, 1), std::invalid_argument);
    CHECK_THROWS_AS((void)enhance(bundle, vae.bundle->model, {}, 4, 1), std::invalid_argument);

    EnhancerBundle mismatched(8, 8, 8, 23);
    CHECK_THROWS_AS((void)enhance(mismatched, vae.bundle->model, coarse, 4, 1), std::invalid_argument);

    auto out1 = enhance(bundle, vae.bundle->model, coarse, 4, 1);
    auto out2 = enhance(bundle, vae.bundle->model, coarse, 4, 1);
    REQUIRE(out1.size() == 2);
    CHECK(out1[0].shape() == Shape{3, 32, 32});
    CHECK(out1[0].bit_equal(out2[0]));
    CHECK(out1[1].bit_equal(out2[1]));
    auto out3 = enhance(bundle, vae.bundle->model, coarse, 4, 2);
    CHECK_FALSE(out1[0].bit_equal(out3[0]));
    CHECK(out1[0].min() >= -1.0);
    CHECK(out1[0].max() <= 1.0);
}

TEST_CASE("enhancer training smoke run keeps the vae frozen") {
    TempDir tmp("train");
    EnhancerConfig cfg;
    cfg.out_dir = (tmp.path / "enh").string();
    cfg.vae_checkpoint = write_tiny_vae(tmp.path, 32);
    cfg.steps = 20;
    cfg.eval_every = 10;
    cfg.lr = 1e-3;
    cfg.clip_count = 4;
    cfg.clip_len = 2;
    cfg.resolution = 32;
    cfg.severity = 0.5;
    cfg.sample_steps = 3;
    cfg.train_schedule = 40;
    cfg.base_width = 8;

    EnhancerTrainResult res = train_enhancer(cfg);
    CHECK(res.steps_run == 20);
    CHECK(fs::exists(res.checkpoint_path));
    CHECK(std::isfinite(res.final_latent_loss));
    CHECK(res.initial_latent_loss > 0.0);

    LoadedEnhancer back = load_enhancer_checkpoint(res.checkpoint_path);
    CHECK(back.step == 20);
    CHECK(back.bundle->latent_scale > 0.0);
    LoadedVae vae = load_vae_checkpoint(cfg.vae_checkpoint);
    CHECK(back.vae_hash == vae.content_hash);

    // The metrics log has train terms and eval rows, no timestamps.
    std::ifstream in(res.metrics_path);
    std::string line;
    bool saw_v = false, saw_eval = false;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK_FALSE(j.contains("timestamp"));
        if (j.contains("v")) saw_v = true;
        if (j.contains("eval_psnr_enhanced")) saw_eval = true;
    }
    CHECK(saw_v);
    CHECK(saw_eval);
}
