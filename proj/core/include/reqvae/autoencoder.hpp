#pragma once

#include <vector>

#include "reqvae/nn.hpp"
#include "reqvae/rng.hpp"

namespace reqvae {

struct EncoderConfig {
    int64_t down_factor = 16;     // 8 or 16
    int64_t latent_channels = 16; // 4..64
    int64_t base_width = 32;
    ad::PadMode padding = ad::PadMode::circular;

    void validate() const;
    int64_t stages() const;  // log2(down_factor)
};

/// Diagonal-Gaussian posterior over the latent grid; logvar is clamped
/// to [-30, 20] so exp() stays finite.
struct LatentDistribution {
    ad::Var mean;    // [B,C,h,w]
    ad::Var logvar;  // [B,C,h,w]
};

/// KL to the standard-normal prior, as a mean over latent elements:
/// 0.5 * mean(mu^2 + exp(logvar) - 1 - logvar).
ad::Var kl_loss(const LatentDistribution& dist);

/// Residual conv VAE: stride-2 stages with widths base_width * {1,2,4,4}
/// (truncated to log2(d) stages), group norm + silu, a 2C head split into
/// mean/logvar, and a mirrored nearest-upsample decoder ending in tanh.
/// Only the latent-adjacent layers depend on C, which keeps parameter
/// counts comparable across channel ablations.
class Autoencoder {
public:
    Autoencoder(const EncoderConfig& cfg, uint64_t seed);

    const EncoderConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }

    /// imgs: [B,3,H,W] with H, W divisible by d.
    LatentDistribution encode(const ad::Var& imgs) const;
    /// z: [B,C,h,w] -> [B,3,h*d,w*d] in [-1, 1].
    ad::Var decode(const ad::Var& z) const;
    static ad::Var reparameterize(const LatentDistribution& dist, Rng& rng);

    /// Frozen-weight conveniences on plain tensors ([3,H,W] or [B,3,H,W]).
    Tensor encode_mean(const Tensor& imgs) const;
    Tensor decode_plain(const Tensor& z) const;

private:
    EncoderConfig cfg_;
    nn::ParamStore ps_;
    std::vector<int64_t> widths_;

    nn::Conv2d enc_stem_;
    std::vector<nn::Conv2d> enc_down_;
    std::vector<nn::ResBlock> enc_res_;
    nn::ResBlock enc_mid_;
    nn::GroupNorm enc_head_norm_;
    nn::Conv2d enc_head_;

    nn::Conv2d dec_in_;
    nn::ResBlock dec_mid_;
    std::vector<nn::ResBlock> dec_res_;
    std::vector<nn::Conv2d> dec_up_;
    nn::GroupNorm dec_out_norm_;
    nn::Conv2d dec_out_;
};

}  // namespace reqvae
