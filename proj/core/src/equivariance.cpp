#include "reqvae/equivariance.hpp"

#include <stdexcept>

namespace reqvae {

namespace {

ad::Var as_batch(const Tensor& img) {
    if (img.ndim() == 3) return ad::constant(img.reshaped({1, img.size(0), img.size(1), img.size(2)}));
    if (img.ndim() == 4) return ad::constant(img);
    throw std::invalid_argument("expected [3,H,W] or [B,3,H,W], got " + shape_str(img.shape()));
}

}  // namespace

ad::Var latent_equivariance_from(const ad::Var& z_img, const ad::Var& z_timg, const TransformSpec& t,
                                 int64_t d) {
    ad::Var moved = apply_to_latent_var(z_img, t, d);
    if (!moved->value.same_shape(z_timg->value))
        throw std::invalid_argument("latent equivariance: branch shapes differ: " +
                                    shape_str(moved->value.shape()) + " vs " +
                                    shape_str(z_timg->value.shape()));
    return ad::mse_loss(moved, z_timg);
}

ad::Var latent_equivariance_loss(const EncoderFn& enc, const Tensor& img, const TransformSpec& t, int64_t d) {
    ad::Var i = as_batch(img);
    ad::Var ti = as_batch(apply_to_image(img, t));
    return latent_equivariance_from(enc(i), enc(ti), t, d);
}

ad::Var latent_equivariance_loss(const Autoencoder& model, const Tensor& img, const TransformSpec& t) {
    EncoderFn enc = [&model](const ad::Var& x) { return model.encode(x).mean; };
    return latent_equivariance_loss(enc, img, t, model.config().down_factor);
}

ad::Var reconstruction_loss(const ad::Var& decoded, const Tensor& target, const Teacher* teacher,
                            double perceptual_weight) {
    if (!decoded->value.same_shape(target))
        throw std::invalid_argument("reconstruction: shapes differ: " + shape_str(decoded->value.shape()) +
                                    " vs " + shape_str(target.shape()));
    ad::Var rec = ad::l1_loss(decoded, ad::constant(target));
    if (teacher && perceptual_weight > 0.0) {
        if (!teacher->differentiable())
            throw std::invalid_argument("perceptual term needs a differentiable teacher");
        const std::vector<std::string> no_ids(static_cast<size_t>(target.size(0)));
        Tensor ref = teacher->extract_plain(target, no_ids);
        ad::Var feats = teacher->extract(decoded, no_ids);
        rec = ad::add(rec, ad::scale(ad::mse_loss(feats, ad::constant(std::move(ref))), perceptual_weight));
    }
    return rec;
}

PatchDiscriminator::PatchDiscriminator(int64_t base_width, int64_t down_layers, uint64_t seed) {
    if (down_layers < 1 || down_layers > 4)
        throw std::invalid_argument("discriminator down_layers must be 1..4");
    Rng rng = Rng::derive(seed, 0xd15c);
    int64_t cin = 3;
    int64_t w = base_width;
    for (int64_t i = 0; i < down_layers; ++i) {
        convs_.emplace_back(ps_, "d" + std::to_string(i), cin, w, 3, 2, ad::PadMode::zeros, rng);
        norms_.emplace_back(ps_, "n" + std::to_string(i), w);
        cin = w;
        w *= 2;
    }
    head_ = nn::Conv2d(ps_, "head", cin, 1, 3, 1, ad::PadMode::zeros, rng);
}

ad::Var PatchDiscriminator::operator()(const ad::Var& imgs) const {
    ad::Var h = imgs;
    for (size_t i = 0; i < convs_.size(); ++i) h = ad::leaky_relu(norms_[i](convs_[i](h)), 0.2);
    return head_(h);
}

ad::Var hinge_disc_loss(const ad::Var& d_real, const ad::Var& d_fake) {
    return ad::add(ad::mean_all(ad::relu(ad::offset(ad::neg(d_real), 1.0))),
                   ad::mean_all(ad::relu(ad::offset(d_fake, 1.0))));
}

ad::Var hinge_gen_loss(const ad::Var& d_fake) { return ad::neg(ad::mean_all(d_fake)); }

double discriminator_step(PatchDiscriminator& disc, nn::Adam& opt, const Tensor& real, const Tensor& fake) {
    ad::Var loss = hinge_disc_loss(disc(ad::constant(real)), disc(ad::constant(fake)));
    disc.params().zero_grad();
    ad::backward(loss);
    opt.step(disc.params());
    return loss->value[0];
}

ReconBreakdown recon_equivariance_loss(const Autoencoder& model, const Teacher* teacher,
                                       const PatchDiscriminator* disc, const Tensor& img,
                                       const TransformSpec& t, const ReconWeights& w, Rng& rng) {
    ad::Var i = as_batch(img);
    const Tensor timg = apply_to_image(i->value, t);
    LatentDistribution dist = model.encode(i);
    ad::Var z = Autoencoder::reparameterize(dist, rng);
    ad::Var decoded = model.decode(apply_to_latent_var(z, t, model.config().down_factor));

    ReconBreakdown out;
    out.rec = reconstruction_loss(decoded, timg, teacher, w.perceptual);
    out.reg = kl_loss(dist);
    out.total = ad::add(out.rec, ad::scale(out.reg, w.lambda_reg));
    if (disc && w.lambda_gan > 0.0) {
        out.gan = hinge_gen_loss((*disc)(decoded));
        out.total = ad::add(out.total, ad::scale(out.gan, w.lambda_gan));
    }
    return out;
}

}  // namespace reqvae
