#pragma once

#include <array>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "reqvae/autoencoder.hpp"
#include "reqvae/config.hpp"
#include "reqvae/data.hpp"
#include "reqvae/nn.hpp"
#include "reqvae/teacher.hpp"

namespace reqvae {

/// Variance-preserving cosine schedule on a grid of `points` timesteps
/// indexed 1..points: alpha(1) = 1 (clean), alpha(points) ~ 0 (noise),
/// alpha^2 + sigma^2 = 1 everywhere.
struct NoiseSchedule {
    int64_t points = 0;

    static NoiseSchedule cosine(int64_t points);
    /// Fraction through the schedule, in [0, 1].
    double frac(int64_t i) const;
    double alpha(int64_t i) const;
    double sigma(int64_t i) const;

private:
    void check(int64_t i) const;
};

/// v = alpha * eps - sigma * x0.
Tensor v_target(const Tensor& x0, const Tensor& eps, double alpha, double sigma);

struct Degradation {
    double blur_sigma = 0.0;
    double occlusion = 0.0;  // target covered area fraction
    double noise = 0.0;      // additive Gaussian stddev
};

struct CoarseRender {
    std::vector<Tensor> frames;  // each [3,H,W]
    Degradation degradation;
};

/// Axis-aligned rectangles (y, x, h, w) whose union covers about
/// `fraction` of the h x w area.
std::vector<std::array<int64_t, 4>> sample_occlusions(int64_t h, int64_t w, double fraction, Rng& rng);

/// Blur + occlusion + noise, each scaled by severity in [0, 1];
/// severity 0 returns the input untouched. Deterministic per seed.
CoarseRender degrade(const std::vector<Tensor>& frames, double severity, uint64_t seed);

/// Clip directory of numbered frames plus a render.json descriptor.
void save_render(const std::string& dir, const CoarseRender& render);
CoarseRender load_render(const std::string& dir);

/// Trainable conv stack mapping frames to conditioning latents on the
/// frozen VAE's grid: [B,3,H,W] -> [B,C,H/d,W/d].
class FeatureHead {
public:
    FeatureHead() = default;
    FeatureHead(nn::ParamStore& ps, int64_t down_factor, int64_t base_width, int64_t latent_channels,
                Rng& rng);
    ad::Var operator()(const ad::Var& frames) const;

private:
    std::vector<nn::Conv2d> down_;
    std::vector<nn::GroupNorm> norms_;
    nn::Conv2d head_;
};

/// Small two-level UNet over the latent grid. Input is the noisy latent
/// concatenated with the conditioning latent (2C channels); the timestep
/// enters through a sinusoidal embedding added per-channel inside each
/// block. Output is the v-prediction (C channels).
class DenoiserUNet {
public:
    DenoiserUNet() = default;
    DenoiserUNet(nn::ParamStore& ps, int64_t latent_channels, int64_t base_width, Rng& rng);
    ad::Var operator()(const ad::Var& x_with_cond, double time_frac) const;

private:
    struct Block {
        nn::GroupNorm n1, n2;
        nn::Conv2d c1, c2, skip;
        nn::Linear temb;
        bool project = false;
    };
    Block make_block(nn::ParamStore& ps, const std::string& name, int64_t cin, int64_t cout, Rng& rng);
    ad::Var run_block(const Block& b, const ad::Var& x, const ad::Var& emb) const;

    nn::Conv2d in_;
    Block down_block_;
    nn::Conv2d down_;
    Block mid_;
    nn::Conv2d up_;
    Block out_block_;
    nn::GroupNorm out_norm_;
    nn::Conv2d out_;
};

/// Feature head + denoiser sharing one parameter store, so one
/// optimizer and one checkpoint cover the whole trainable side.
/// Diffusion runs on codes normalized to roughly unit rms: the trainer
/// measures the frozen VAE's latent scale once and divides it out, so
/// the noise schedule's unit-variance end is commensurate with the
/// signal; decode multiplies the scale back.
struct EnhancerBundle {
    nn::ParamStore ps;
    FeatureHead head;
    DenoiserUNet unet;
    int64_t latent_channels = 0;
    int64_t down_factor = 0;
    double latent_scale = 1.0;

    EnhancerBundle(int64_t latent_channels, int64_t down_factor, int64_t base_width, uint64_t seed);
};

void save_enhancer_checkpoint(const std::string& path, const EnhancerBundle& bundle,
                              const nlohmann::json& config_json, int64_t step, uint64_t vae_hash,
                              const nn::Adam* opt = nullptr);

struct LoadedEnhancer {
    nlohmann::json config_json;
    EnhancerConfig config;
    std::unique_ptr<EnhancerBundle> bundle;
    int64_t step = 0;
    uint64_t vae_hash = 0;
    std::map<std::string, Tensor> extra;
};

LoadedEnhancer load_enhancer_checkpoint(const std::string& path);

struct EnhancerTrainResult {
    std::string checkpoint_path;
    std::string metrics_path;
    double initial_latent_loss = 0.0;
    double final_latent_loss = 0.0;
    int64_t steps_run = 0;
};

/// Trains denoiser + feature head against a frozen autoencoder loaded
/// from cfg.vae_checkpoint; throws if any frozen tensor changes.
EnhancerTrainResult train_enhancer(const EnhancerConfig& cfg, std::ostream* progress = nullptr);

/// Deterministic latent-space sampler: `steps` v-prediction updates
/// conditioned on the feature head's output, decoded by the frozen VAE.
std::vector<Tensor> enhance(const EnhancerBundle& bundle, const Autoencoder& vae,
                            const std::vector<Tensor>& coarse, int64_t steps, uint64_t seed);

}  // namespace reqvae
