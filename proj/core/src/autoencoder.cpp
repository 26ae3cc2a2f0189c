#include "reqvae/autoencoder.hpp"

#include <stdexcept>

namespace reqvae {

void EncoderConfig::validate() const {
    if (down_factor != 8 && down_factor != 16)
        throw std::invalid_argument("down_factor must be 8 or 16, got " + std::to_string(down_factor));
    if (latent_channels < 1 || latent_channels > 512)
        throw std::invalid_argument("latent_channels out of range: " + std::to_string(latent_channels));
    if (base_width < 4) throw std::invalid_argument("base_width too small: " + std::to_string(base_width));
}

int64_t EncoderConfig::stages() const { return down_factor == 8 ? 3 : 4; }

Autoencoder::Autoencoder(const EncoderConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng::derive(seed, 0xae'01);
    const int64_t n = cfg_.stages();
    const int64_t mult[4] = {1, 2, 4, 4};
    for (int64_t i = 0; i < n; ++i) widths_.push_back(cfg_.base_width * mult[i]);
    const int64_t c = cfg_.latent_channels;
    const ad::PadMode pad = cfg_.padding;

    enc_stem_ = nn::Conv2d(ps_, "enc.stem", 3, widths_[0], 3, 1, pad, rng);
    for (int64_t i = 0; i < n; ++i) {
        const int64_t cin = i == 0 ? widths_[0] : widths_[i - 1];
        enc_down_.emplace_back(ps_, "enc.down" + std::to_string(i), cin, widths_[i], 3, 2, pad, rng);
        enc_res_.emplace_back(ps_, "enc.res" + std::to_string(i), widths_[i], widths_[i], pad, rng);
    }
    enc_mid_ = nn::ResBlock(ps_, "enc.mid", widths_[n - 1], widths_[n - 1], pad, rng);
    enc_head_norm_ = nn::GroupNorm(ps_, "enc.head_norm", widths_[n - 1]);
    enc_head_ = nn::Conv2d(ps_, "enc.head", widths_[n - 1], 2 * c, 3, 1, pad, rng);

    dec_in_ = nn::Conv2d(ps_, "dec.in", c, widths_[n - 1], 3, 1, pad, rng);
    dec_mid_ = nn::ResBlock(ps_, "dec.mid", widths_[n - 1], widths_[n - 1], pad, rng);
    for (int64_t i = n - 1; i >= 0; --i) {
        const int64_t cout = i == 0 ? widths_[0] : widths_[i - 1];
        dec_res_.emplace_back(ps_, "dec.res" + std::to_string(i), widths_[i], widths_[i], pad, rng);
        dec_up_.emplace_back(ps_, "dec.up" + std::to_string(i), widths_[i], cout, 3, 1, pad, rng);
    }
    dec_out_norm_ = nn::GroupNorm(ps_, "dec.out_norm", widths_[0]);
    dec_out_ = nn::Conv2d(ps_, "dec.out", widths_[0], 3, 3, 1, pad, rng);
}

LatentDistribution Autoencoder::encode(const ad::Var& imgs) const {
    const Shape& s = imgs->value.shape();
    if (s.size() != 4 || s[1] != 3) throw std::invalid_argument("encode: expects [B,3,H,W], got " + shape_str(s));
    const int64_t d = cfg_.down_factor;
    if (s[2] % d || s[3] % d)
        throw std::invalid_argument("encode: spatial dims " + shape_str(s) + " not divisible by factor " +
                                    std::to_string(d));

    ad::Var h = enc_stem_(imgs);
    for (size_t i = 0; i < enc_down_.size(); ++i) {
        h = enc_down_[i](h);
        h = enc_res_[i](h);
    }
    h = enc_mid_(h);
    h = enc_head_(ad::silu(enc_head_norm_(h)));

    const int64_t c = cfg_.latent_channels;
    LatentDistribution dist;
    dist.mean = ad::slice(h, 1, 0, c);
    dist.logvar = ad::clamp(ad::slice(h, 1, c, c), -30.0, 20.0);
    return dist;
}

ad::Var Autoencoder::decode(const ad::Var& z) const {
    const Shape& s = z->value.shape();
    if (s.size() != 4 || s[1] != cfg_.latent_channels)
        throw std::invalid_argument("decode: expects [B," + std::to_string(cfg_.latent_channels) +
                                    ",h,w], got " + shape_str(s));
    ad::Var h = dec_in_(z);
    h = dec_mid_(h);
    for (size_t i = 0; i < dec_res_.size(); ++i) {
        h = dec_res_[i](h);
        h = dec_up_[i](ad::upsample_nearest2(h));
    }
    return ad::tanh(dec_out_(ad::silu(dec_out_norm_(h))));
}

ad::Var Autoencoder::reparameterize(const LatentDistribution& dist, Rng& rng) {
    Tensor eps = Tensor::randn(dist.mean->value.shape(), rng);
    return ad::add(dist.mean, ad::mul(ad::exp(ad::scale(dist.logvar, 0.5)), ad::constant(std::move(eps))));
}

Tensor Autoencoder::encode_mean(const Tensor& imgs) const {
    const bool single = imgs.ndim() == 3;
    const Tensor batch = single ? imgs.reshaped({1, imgs.size(0), imgs.size(1), imgs.size(2)}) : imgs;
    Tensor out = encode(ad::constant(batch)).mean->value;
    if (single) return out.reshaped({out.size(1), out.size(2), out.size(3)});
    return out;
}

ad::Var kl_loss(const LatentDistribution& dist) {
    ad::Var inner = ad::sub(ad::add(ad::square(dist.mean), ad::exp(dist.logvar)), ad::offset(dist.logvar, 1.0));
    return ad::mean_all(ad::scale(inner, 0.5));
}

Tensor Autoencoder::decode_plain(const Tensor& z) const {
    const bool single = z.ndim() == 3;
    const Tensor batch = single ? z.reshaped({1, z.size(0), z.size(1), z.size(2)}) : z;
    Tensor out = decode(ad::constant(batch))->value;
    if (single) return out.reshaped({out.size(1), out.size(2), out.size(3)});
    return out;
}

}  // namespace reqvae
