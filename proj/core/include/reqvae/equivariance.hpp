#pragma once

#include <functional>

#include "reqvae/autoencoder.hpp"
#include "reqvae/teacher.hpp"
#include "reqvae/transforms.hpp"

namespace reqvae {

/// Encoder functional for the latent equivariance loss; lets tests plug
/// analytic stubs (e.g. d x d average pooling). [B,3,H,W] -> [B,C,h,w].
using EncoderFn = std::function<ad::Var(const ad::Var&)>;

/// mean elementwise squared error between the transformed latent of the
/// image and the latent of the transformed image. Gradients flow through
/// both branches.
ad::Var latent_equivariance_from(const ad::Var& z_img, const ad::Var& z_timg, const TransformSpec& t,
                                 int64_t d);

/// Convenience running both encoder branches; img is [3,H,W] or [B,3,H,W].
ad::Var latent_equivariance_loss(const EncoderFn& enc, const Tensor& img, const TransformSpec& t, int64_t d);
ad::Var latent_equivariance_loss(const Autoencoder& model, const Tensor& img, const TransformSpec& t);

/// L1 plus perceptual_weight * squared teacher-feature distance. The
/// teacher must be differentiable; pass nullptr to use plain L1.
ad::Var reconstruction_loss(const ad::Var& decoded, const Tensor& target, const Teacher* teacher,
                            double perceptual_weight);

/// Hinge patch discriminator over image inputs; logits keep a spatial
/// grid so each score judges one receptive-field patch.
class PatchDiscriminator {
public:
    PatchDiscriminator(int64_t base_width, int64_t down_layers, uint64_t seed);
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    /// [B,3,H,W] -> [B,1,h',w'] logits.
    ad::Var operator()(const ad::Var& imgs) const;

private:
    nn::ParamStore ps_;
    std::vector<nn::Conv2d> convs_;
    std::vector<nn::GroupNorm> norms_;
    nn::Conv2d head_;
};

/// mean ReLU(1 - D(real)) + mean ReLU(1 + D(fake)).
ad::Var hinge_disc_loss(const ad::Var& d_real, const ad::Var& d_fake);
/// -mean D(fake).
ad::Var hinge_gen_loss(const ad::Var& d_fake);

/// One adversary update on (real, fake) pairs; fake enters detached so
/// only discriminator parameters move. Returns the hinge loss value.
double discriminator_step(PatchDiscriminator& disc, nn::Adam& opt, const Tensor& real, const Tensor& fake);

struct ReconWeights {
    double lambda_gan = 0.0;
    double lambda_reg = 1.0;
    double perceptual = 0.1;
};

struct ReconBreakdown {
    ad::Var rec, gan, reg;  // gan is null when no discriminator is wired
    ad::Var total;          // rec + lambda_gan * gan + lambda_reg * reg
};

/// Reconstruction-equivariance objective on one image: decode the
/// transformed posterior sample and score it against the transformed
/// image, plus optional adversarial and KL terms.
ReconBreakdown recon_equivariance_loss(const Autoencoder& model, const Teacher* teacher,
                                       const PatchDiscriminator* disc, const Tensor& img,
                                       const TransformSpec& t, const ReconWeights& w, Rng& rng);

}  // namespace reqvae
