#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "reqvae/checkpoint.hpp"
#include "reqvae/vae_trainer.hpp"

using namespace reqvae;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const char* tag) {
        path = fs::temp_directory_path() / (std::string("reqvae_tr_") + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

EncoderConfig mini_encoder() {
    EncoderConfig cfg;
    cfg.down_factor = 8;
    cfg.latent_channels = 4;
    cfg.base_width = 4;
    return cfg;
}

TrainConfig smoke_config(const std::string& out_dir) {
    TrainConfig cfg;
    cfg.seed = 3;
    cfg.steps = 4;
    cfg.batch_size = 2;
    cfg.lr = 1e-3;
    cfg.eval_every = 2;
    cfg.out_dir = out_dir;
    cfg.data.count = 8;
    cfg.data.resolution = 16;
    cfg.data.split[0] = 0.75;
    cfg.data.split[1] = 0.25;
    cfg.data.split[2] = 0.0;
    cfg.model.down_factor = 8;
    cfg.model.latent_channels = 4;
    cfg.model.base_width = 4;
    cfg.loss.token_cap = 4;
    return cfg;
}

std::vector<BatchSample> make_batch(const std::vector<Tensor>& imgs, const TransformSpec& t) {
    std::vector<BatchSample> batch;
    for (size_t i = 0; i < imgs.size(); ++i) batch.push_back({&imgs[i], "img_" + std::to_string(i), t});
    return batch;
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

}  // namespace

TEST_CASE("total_loss breakdown matches the weighted sum") {
    VaeBundle vb(mini_encoder(), 64, 5);
    auto teacher = make_builtin_teacher(7);
    Rng data_rng(1);
    std::vector<Tensor> imgs{Tensor::rand_uniform({3, 16, 16}, data_rng, -1, 1),
                             Tensor::rand_uniform({3, 16, 16}, data_rng, -1, 1)};
    auto batch = make_batch(imgs, TransformSpec::flip_h());

    LossConfig cfg;
    cfg.w_align = 0.7;
    cfg.w_equi = 1.3;
    cfg.beta_kl = 1e-4;
    cfg.token_cap = 4;

    Rng noise = Rng::derive(2, 0x13, 0);
    Rng tokens = Rng::derive(2, 0x14, 0);
    TotalLossResult res = total_loss(batch, vb, *teacher, nullptr, cfg, noise, tokens);

    const LossBreakdown& v = res.values;
    const double recon_total = v.rec + cfg.lambda_gan * v.gan + cfg.lambda_reg * v.reg;
    const double expected = cfg.w_align * (v.align_dist + v.align_cos) + cfg.w_equi * (v.latent_eq + recon_total) +
                            cfg.beta_kl * v.kl;
    CHECK(v.total == doctest::Approx(expected).epsilon(1e-9));
    CHECK(res.total->value[0] == doctest::Approx(v.total).epsilon(1e-12));
    CHECK(v.reg == doctest::Approx(v.kl).epsilon(1e-12));
    CHECK(v.total >= 0.0);
    REQUIRE(res.rows.size() == 2);
    CHECK(res.rows[0].transform == "flip_h");
    REQUIRE(res.decoded.size() == 2);
    CHECK(res.decoded[0].shape() == res.targets[0].shape());
}

TEST_CASE("zeroing every weight zeroes the objective") {
    VaeBundle vb(mini_encoder(), 64, 6);
    auto teacher = make_builtin_teacher(7);
    Rng data_rng(2);
    std::vector<Tensor> imgs{Tensor::rand_uniform({3, 16, 16}, data_rng, -1, 1)};
    auto batch = make_batch(imgs, TransformSpec::rot90(1));

    LossConfig cfg;
    cfg.w_align = 0.0;
    cfg.w_equi = 0.0;
    cfg.beta_kl = 0.0;
    cfg.token_cap = 4;

    Rng noise(3), tokens(4);
    TotalLossResult res = total_loss(batch, vb, *teacher, nullptr, cfg, noise, tokens);
    CHECK(res.values.total == 0.0);
    CHECK(res.total->value[0] == 0.0);
    // Components are still reported for logging even when unweighted.
    CHECK(res.values.rec > 0.0);
    CHECK(res.values.kl > 0.0);
}

TEST_CASE("identity transforms give zero latent equivariance term") {
    VaeBundle vb(mini_encoder(), 64, 8);
    auto teacher = make_builtin_teacher(7);
    Rng data_rng(5);
    std::vector<Tensor> imgs{Tensor::rand_uniform({3, 16, 16}, data_rng, -1, 1)};
    auto batch = make_batch(imgs, TransformSpec::identity());
    LossConfig cfg;
    cfg.token_cap = 4;
    Rng noise(6), tokens(7);
    TotalLossResult res = total_loss(batch, vb, *teacher, nullptr, cfg, noise, tokens);
    CHECK(res.values.latent_eq == 0.0);
    CHECK(res.values.rec > 0.0);
}

TEST_CASE("total_loss gradients reach model and projection parameters") {
    VaeBundle vb(mini_encoder(), 64, 9);
    auto teacher = make_builtin_teacher(7);
    Rng data_rng(8);
    std::vector<Tensor> imgs{Tensor::rand_uniform({3, 16, 16}, data_rng, -1, 1)};
    auto batch = make_batch(imgs, TransformSpec::flip_v());
    LossConfig cfg;
    cfg.token_cap = 8;
    Rng noise(9), tokens(10);
    TotalLossResult res = total_loss(batch, vb, *teacher, nullptr, cfg, noise, tokens);
    vb.model.params().zero_grad();
    ad::backward(res.total);
    for (const char* name : {"enc.stem.w", "dec.out.w", "proj.w"}) {
        ad::Var p = vb.model.params().get(name);
        REQUIRE(p->grad.numel() == p->value.numel());
        CHECK(p->grad.abs_max() > 0.0);
    }
}

TEST_CASE("total_loss matches finite differences through a probe weight") {
    VaeBundle vb(mini_encoder(), 64, 10);
    auto teacher = make_builtin_teacher(7);
    Rng data_rng(11);
    std::vector<Tensor> imgs{Tensor::rand_uniform({3, 16, 16}, data_rng, -1, 1)};
    auto batch = make_batch(imgs, TransformSpec::flip_h());
    LossConfig cfg;
    cfg.token_cap = 4;
    cfg.beta_kl = 1e-3;

    auto eval_loss = [&] {
        Rng noise(12), tokens(13);
        return total_loss(batch, vb, *teacher, nullptr, cfg, noise, tokens);
    };

    TotalLossResult res = eval_loss();
    vb.model.params().zero_grad();
    ad::backward(res.total);

    for (const char* name : {"proj.w", "enc.head.w"}) {
        ad::Var p = vb.model.params().get(name);
        REQUIRE(p->grad.numel() == p->value.numel());
        const int64_t idx = p->value.numel() / 2;
        const double analytic = p->grad[idx];
        const double h = 1e-5;
        const double keep = p->value[idx];
        p->value[idx] = keep + h;
        const double fp = eval_loss().values.total;
        p->value[idx] = keep - h;
        const double fm = eval_loss().values.total;
        p->value[idx] = keep;
        const double numeric = (fp - fm) / (2 * h);
        const double denom = std::max({1e-3, std::abs(numeric), std::abs(analytic)});
        CHECK(std::abs(numeric - analytic) / denom < 1e-3);
    }
}

TEST_CASE("vae checkpoint round-trips parameters, step and config") {
    TempDir tmp("ckpt");
    VaeBundle vb(mini_encoder(), 64, 11);
    nn::Adam opt;
    Rng g(1);
    // One optimizer step creates nontrivial moment state to checkpoint.
    ad::backward(ad::mean_all(ad::square(vb.model.decode(ad::constant(Tensor::randn({1, 4, 2, 2}, g))))));
    opt.step(vb.model.params());

    TrainConfig tc;
    tc.out_dir = "x";
    tc.model.down_factor = 8;
    tc.model.latent_channels = 4;
    tc.model.base_width = 4;
    const std::string path = (tmp.path / "ck.rqta").string();
    save_vae_checkpoint(path, vb, tc.to_json(), 42, &opt);

    LoadedVae loaded = load_vae_checkpoint(path);
    CHECK(loaded.step == 42);
    CHECK(loaded.config.out_dir == "x");
    CHECK(loaded.bundle->teacher_dim == 64);
    auto orig = vb.model.params().state();
    auto back = loaded.bundle->model.params().state();
    REQUIRE(orig.size() == back.size());
    for (const auto& [name, t] : orig) CHECK(t.bit_equal(back.at(name)));
    CHECK(loaded.extra.count("opt.t") == 1);
    CHECK(loaded.content_hash == content_hash(orig));
}

TEST_CASE("checkpoint kind mismatch is rejected") {
    TempDir tmp("kind");
    TensorArchive a;
    a.meta = {{"kind", "enhancer"}, {"step", 1}};
    a.tensors["w"] = Tensor::zeros({1});
    const std::string p = (tmp.path / "wrong.rqta").string();
    a.save(p);
    CHECK_THROWS_AS((void)load_vae_checkpoint(p), std::runtime_error);
}

TEST_CASE("smoke training run writes checkpoint and deterministic metrics") {
    TempDir tmp("run");
    TrainConfig cfg = smoke_config((tmp.path / "a").string());
    TrainResult res = train_vae(cfg);
    CHECK(res.steps_run == 4);
    CHECK(fs::exists(res.checkpoint_path));
    CHECK(fs::exists(res.metrics_path));
    CHECK(std::isfinite(res.final_loss.total));

    LoadedVae loaded = load_vae_checkpoint(res.checkpoint_path);
    CHECK(loaded.step == 4);
    CHECK(loaded.config.seed == 3);

    // Identical config and seed into a fresh directory: byte-identical log.
    TrainConfig cfg2 = smoke_config((tmp.path / "b").string());
    TrainResult res2 = train_vae(cfg2);
    auto lines1 = read_lines(res.metrics_path);
    auto lines2 = read_lines(res2.metrics_path);
    CHECK(lines1 == lines2);
    CHECK_FALSE(lines1.empty());

    // Different seed diverges.
    TrainConfig cfg3 = smoke_config((tmp.path / "c").string());
    cfg3.seed = 4;
    TrainResult res3 = train_vae(cfg3);
    CHECK(read_lines(res3.metrics_path) != lines1);
}

TEST_CASE("metrics log carries term columns and eval rows") {
    TempDir tmp("log");
    TrainConfig cfg = smoke_config((tmp.path / "run").string());
    TrainResult res = train_vae(cfg);
    auto lines = read_lines(res.metrics_path);
    REQUIRE_FALSE(lines.empty());

    bool saw_step = false, saw_eval = false, saw_transform = false;
    for (const auto& line : lines) {
        auto j = nlohmann::json::parse(line);
        CHECK_FALSE(j.contains("timestamp"));
        if (j.contains("eval_psnr")) saw_eval = true;
        if (j.contains("transform")) saw_transform = true;
        if (j.contains("total") && j.contains("align_cos") && j.contains("kl")) saw_step = true;
    }
    CHECK(saw_step);
    CHECK(saw_eval);
    CHECK(saw_transform);
}

TEST_CASE("resume reproduces the uninterrupted run exactly") {
    TempDir tmp("resume");
    TrainConfig full = smoke_config((tmp.path / "full").string());
    full.steps = 6;
    full.eval_every = 3;
    TrainResult rfull = train_vae(full);

    TrainConfig head = smoke_config((tmp.path / "head").string());
    head.steps = 3;
    head.eval_every = 3;
    TrainResult rhead = train_vae(head);

    TrainConfig tail = smoke_config((tmp.path / "head").string());
    tail.steps = 6;
    tail.eval_every = 3;
    TrainResult rtail = train_vae(tail, rhead.checkpoint_path);
    CHECK(rtail.steps_run == 3);

    LoadedVae a = load_vae_checkpoint(rfull.checkpoint_path);
    LoadedVae b = load_vae_checkpoint(rtail.checkpoint_path);
    auto sa = a.bundle->model.params().state();
    auto sb = b.bundle->model.params().state();
    for (const auto& [name, t] : sa) {
        INFO("param " << name);
        CHECK(t.abs_max() == doctest::Approx(sb.at(name).abs_max()).epsilon(1e-9));
        double worst = 0.0;
        for (int64_t i = 0; i < t.numel(); ++i) worst = std::max(worst, std::abs(t[i] - sb.at(name)[i]));
        CHECK(worst < 1e-6);
    }

    // The concatenated log of head + tail equals the full run's log.
    auto full_lines = read_lines(rfull.metrics_path);
    auto resumed_lines = read_lines(rtail.metrics_path);
    CHECK(full_lines == resumed_lines);
}

TEST_CASE("resume with a conflicting config is rejected") {
    TempDir tmp("conflict");
    TrainConfig cfg = smoke_config((tmp.path / "run").string());
    TrainResult res = train_vae(cfg);

    TrainConfig other = cfg;
    other.steps = 8;
    other.lr = 5e-4;  // a training hyperparameter, not a runtime knob
    CHECK_THROWS_AS((void)train_vae(other, res.checkpoint_path), std::invalid_argument);

    TrainConfig done = cfg;  // same steps as already completed
    CHECK_THROWS_AS((void)train_vae(done, res.checkpoint_path), std::invalid_argument);
}

TEST_CASE("recon objective falls over 200 steps without alignment pressure") {
    TempDir tmp("recon");
    TrainConfig cfg = smoke_config((tmp.path / "run").string());
    cfg.steps = 200;
    cfg.eval_every = 0;
    cfg.lr = 2e-3;
    cfg.batch_size = 2;
    cfg.loss.w_align = 0.0;
    cfg.loss.w_equi = 1.0;
    cfg.loss.beta_kl = 1e-6;
    cfg.loss.lambda_reg = 1e-6;
    cfg.transforms.preset = "identity";
    TrainResult res = train_vae(cfg);

    auto lines = read_lines(res.metrics_path);
    double early = 0.0, late = 0.0;
    int n_early = 0, n_late = 0;
    for (const auto& line : lines) {
        auto j = nlohmann::json::parse(line);
        if (!j.contains("rec") || !j.contains("step")) continue;
        const int64_t step = j["step"].get<int64_t>();
        if (step <= 20) {
            early += j["rec"].get<double>();
            ++n_early;
        } else if (step > 180) {
            late += j["rec"].get<double>();
            ++n_late;
        }
    }
    REQUIRE(n_early > 0);
    REQUIRE(n_late > 0);
    CHECK(late / n_late < early / n_early);
}
