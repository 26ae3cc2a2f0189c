#pragma once

#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "reqvae/autoencoder.hpp"
#include "reqvae/config.hpp"
#include "reqvae/data.hpp"
#include "reqvae/equivariance.hpp"
#include "reqvae/nn.hpp"
#include "reqvae/teacher.hpp"
#include "reqvae/transforms.hpp"

namespace reqvae {

/// Autoencoder plus the latent-to-teacher projection, sharing one
/// parameter store so a single optimizer and checkpoint cover both.
struct VaeBundle {
    Autoencoder model;
    nn::Linear proj;
    int64_t teacher_dim;

    VaeBundle(const EncoderConfig& cfg, int64_t teacher_dim, uint64_t seed);
};

struct LossBreakdown {
    double total = 0.0;
    double align_cos = 0.0, align_dist = 0.0;
    double latent_eq = 0.0;
    double rec = 0.0, gan = 0.0, reg = 0.0;
    double kl = 0.0;
};

struct PerTransformRow {
    std::string transform;
    double latent_eq = 0.0, rec = 0.0, gan = 0.0, reg = 0.0;
};

struct BatchSample {
    const Tensor* image = nullptr;
    std::string id;
    TransformSpec transform;
};

struct TotalLossResult {
    ad::Var total;
    LossBreakdown values;
    std::vector<PerTransformRow> rows;
    std::vector<Tensor> decoded;  // generator outputs, for the discriminator step
    std::vector<Tensor> targets;  // the transformed images they approximate
};

/// One training objective evaluation over a batch. Each image is
/// encoded once; the posterior feeds the KL term, the alignment tokens,
/// the latent equivariance residual and the transformed reconstruction.
TotalLossResult total_loss(const std::vector<BatchSample>& batch, VaeBundle& vb, const Teacher& teacher,
                           PatchDiscriminator* disc, const LossConfig& cfg, Rng& noise_rng,
                           Rng& token_rng);

void save_vae_checkpoint(const std::string& path, const VaeBundle& vb, const nlohmann::json& config_json,
                         int64_t step, const nn::Adam* opt = nullptr,
                         const PatchDiscriminator* disc = nullptr, const nn::Adam* disc_opt = nullptr);

struct LoadedVae {
    nlohmann::json config_json;
    TrainConfig config;
    std::unique_ptr<VaeBundle> bundle;
    int64_t step = 0;
    uint64_t content_hash = 0;
    std::map<std::string, Tensor> extra;  // optimizer and discriminator state
};

LoadedVae load_vae_checkpoint(const std::string& path);

struct TrainResult {
    std::string checkpoint_path;
    std::string metrics_path;
    LossBreakdown final_loss;
    int64_t steps_run = 0;
};

Dataset build_dataset(const DataConfig& cfg);
std::unique_ptr<Teacher> build_teacher(const TeacherConfig& cfg);

/// Runs the training loop described by `cfg`, writing metrics.jsonl and
/// checkpoints under cfg.out_dir. Batch order, transform draws and
/// reparameterization noise are all keyed on (seed, step), so resuming
/// from `resume_from` reproduces the uninterrupted run exactly.
TrainResult train_vae(const TrainConfig& cfg, const std::string& resume_from = "",
                      std::ostream* progress = nullptr);

}  // namespace reqvae
