#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "reqvae/autoencoder.hpp"
#include "reqvae/config.hpp"
#include "reqvae/data.hpp"
#include "reqvae/teacher.hpp"
#include "reqvae/transforms.hpp"

namespace reqvae {

/// Peak signal-to-noise ratio in dB between [-1, 1] images, computed on
/// the [0, 1] rescale with peak 1; identical inputs cap at 100 dB.
double psnr(const Tensor& a, const Tensor& b);

/// Mean local SSIM on the luma channel: 11x11 Gaussian window (sigma
/// 1.5), K1 = 0.01, K2 = 0.03, valid windows only.
double ssim(const Tensor& a, const Tensor& b);

/// Frechet distance between Gaussian fits of feature rows [N, D].
/// Unbiased covariance; if N < D + 1 a 1e-6 ridge is added (and flagged
/// through `ridged` when given).
double frechet_from_features(const Tensor& fa, const Tensor& fb, bool* ridged = nullptr);

/// Pools the teacher grid per image to one row and compares the sets.
double frechet_feature_distance(const std::vector<Tensor>& set_a, const std::vector<Tensor>& set_b,
                                const Teacher& teacher, bool* ridged = nullptr);

/// Per-image spatially pooled teacher features, one row per image.
Tensor pooled_teacher_features(const std::vector<Tensor>& images, const Teacher& teacher);

struct ViolationReport {
    double score = 0.0;
    std::vector<std::pair<std::string, double>> per_transform;
};

/// Plain-tensor encoder hook for the violation score; [3,H,W] -> [C,h,w].
using PlainEncoderFn = std::function<Tensor(const Tensor&)>;

/// mean over images and group members of |tau Z(I) - Z(tau I)|^2 /
/// (|Z(I)|^2 + eps), on posterior means.
ViolationReport equivariance_violation(const Autoencoder& model, const std::vector<Tensor>& images,
                                       const TransformGroup& group);
ViolationReport equivariance_violation(const PlainEncoderFn& encode, int64_t d,
                                       const std::vector<Tensor>& images, const TransformGroup& group);

struct MetricsRow {
    std::string id;
    double psnr = 0.0, ssim = 0.0, perceptual = 0.0;
};

struct MetricsReport {
    std::vector<MetricsRow> rows;
    double mean_psnr = 0.0, mean_ssim = 0.0, mean_perceptual = 0.0;
    double ffd = 0.0;
    std::optional<double> violation;
    std::string config_hash;
    uint64_t seed = 0;

    void recompute_aggregates();
    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static MetricsReport load(const std::string& path);
    std::string render_table() const;
};

/// Reconstructs every indexed image through the frozen model and
/// reports per-image PSNR / SSIM / teacher-feature error plus set-level
/// feature distance (and group violation when a group is given).
MetricsReport evaluate_model(const Autoencoder& model, const Teacher& teacher, const Dataset& data,
                             const std::vector<size_t>& indices, const TransformGroup* group);

struct AblationRow {
    int64_t channels = 0;
    double psnr = 0.0, ssim = 0.0, perceptual = 0.0, ffd = 0.0;
    std::string run_dir;
};

/// Trains one model per channel count under the shared budget in `base`
/// and evaluates each on the held-out split. Appends to `rows` as runs
/// finish, so a failing member leaves earlier results intact.
void ablation_harness(const std::vector<int64_t>& channels, const TrainConfig& base,
                      std::vector<AblationRow>& rows, std::ostream* progress = nullptr);

std::string render_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace reqvae
