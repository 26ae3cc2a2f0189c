#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "reqvae/autoencoder.hpp"
#include "reqvae/transforms.hpp"

namespace reqvae {

struct DataConfig {
    std::string kind = "synthetic";  // synthetic | folder
    std::string path;
    int64_t count = 2000;
    int64_t resolution = 64;
    double split[3] = {0.9, 0.1, 0.0};
    uint64_t seed = 7;
};

struct ModelConfig {
    int64_t down_factor = 16;
    int64_t latent_channels = 16;
    int64_t base_width = 32;
    std::string padding = "circular";  // circular | zeros
};

struct LossConfig {
    double w_align = 1.0;
    double w_equi = 1.0;
    double m1 = 0.5;
    double m2 = 0.25;
    double lambda_gan = 0.0;
    double lambda_reg = 1.0;
    double beta_kl = 1e-6;
    double perceptual = 0.1;
    int64_t token_cap = 256;
};

struct TeacherConfig {
    std::string kind = "builtin";  // builtin | file
    uint64_t seed = 17;
    std::string path;
};

struct GanConfig {
    bool enabled = false;
    int64_t base_width = 32;
    int64_t down_layers = 2;
    double lr = 1e-4;
};

struct TransformsConfig {
    std::string preset = "default";  // default | identity | custom
    std::vector<std::pair<std::string, double>> entries;
};

struct TrainConfig {
    uint64_t seed = 1;
    int64_t steps = 1000;
    int64_t batch_size = 4;
    double lr = 1e-4;
    int64_t eval_every = 250;
    int64_t checkpoint_every = 0;  // 0: final checkpoint only
    std::string out_dir;

    DataConfig data;
    ModelConfig model;
    LossConfig loss;
    TeacherConfig teacher;
    GanConfig gan;
    TransformsConfig transforms;

    static TrainConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    /// Every violation, not just the first.
    std::vector<std::string> validate() const;

    EncoderConfig encoder_config() const;
    TransformGroup transform_group() const;
};

struct EnhancerConfig {
    uint64_t seed = 1;
    int64_t steps = 1000;
    int64_t batch_clips = 1;
    double lr = 1e-4;
    int64_t eval_every = 200;
    std::string out_dir;
    std::string vae_checkpoint;

    int64_t clip_count = 64;
    int64_t clip_len = 4;
    int64_t resolution = 64;
    uint64_t data_seed = 7;
    double val_fraction = 0.25;
    double severity = 0.5;

    int64_t sample_steps = 8;
    int64_t train_schedule = 1000;
    int64_t base_width = 32;
    double w_rec = 1.0;
    double w_lat = 1.0;
    TeacherConfig teacher;

    static EnhancerConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    std::vector<std::string> validate() const;
};

/// Applies "a.b.c=value" assignments; values parse as JSON scalars with a
/// plain-string fallback.
nlohmann::json apply_overrides(nlohmann::json config, const std::vector<std::string>& overrides);

std::string sha256_hex(const std::string& data);

/// Hash of the canonical (sorted-key, compact) serialization.
std::string config_hash(const nlohmann::json& config);

/// Creates the directory and holds an exclusive .lock file inside it for
/// the lifetime of the object; a second concurrent holder fails fast.
class DirLock {
public:
    explicit DirLock(const std::string& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string path_;
};

std::string iso_timestamp_utc();
void write_manifest(const std::string& dir, const nlohmann::json& manifest);

}  // namespace reqvae
