#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "gradcheck.hpp"
#include "reqvae/autoencoder.hpp"

using namespace reqvae;

namespace {

EncoderConfig small_cfg() {
    EncoderConfig cfg;
    cfg.down_factor = 8;
    cfg.latent_channels = 4;
    cfg.base_width = 8;
    return cfg;
}

Tensor test_batch(int64_t b, int64_t hw, uint64_t seed) {
    Rng rng(seed);
    Tensor t = Tensor::rand_uniform({b, 3, hw, hw}, rng, -1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("config validation") {
    EncoderConfig cfg = small_cfg();
    cfg.validate();
    CHECK(cfg.stages() == 3);
    cfg.down_factor = 16;
    CHECK(cfg.stages() == 4);
    cfg.down_factor = 12;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = small_cfg();
    cfg.latent_channels = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("kl of unit mean zero logvar is one half") {
    LatentDistribution d;
    d.mean = ad::constant(Tensor::full({1, 2, 2, 2}, 1.0));
    d.logvar = ad::constant(Tensor::zeros({1, 2, 2, 2}));
    CHECK(kl_loss(d)->value[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("kl of zero mean variance four") {
    LatentDistribution d;
    d.mean = ad::constant(Tensor::zeros({1, 1, 2, 2}));
    d.logvar = ad::constant(Tensor::full({1, 1, 2, 2}, std::log(4.0)));
    CHECK(kl_loss(d)->value[0] == doctest::Approx(0.5 * (3.0 - std::log(4.0))).epsilon(1e-12));
}

TEST_CASE("kl is zero exactly at the prior and positive elsewhere") {
    LatentDistribution d;
    d.mean = ad::constant(Tensor::zeros({1, 1, 1, 2}));
    d.logvar = ad::constant(Tensor::zeros({1, 1, 1, 2}));
    CHECK(kl_loss(d)->value[0] == 0.0);
    d.mean = ad::constant(Tensor::from({1, 1, 1, 2}, {0.3, -0.2}));
    CHECK(kl_loss(d)->value[0] > 0.0);
}

TEST_CASE("kl gradient matches finite differences") {
    ad::Var mu = ad::leaf(Tensor::from({1, 1, 1, 3}, {0.5, -1.0, 2.0}));
    ad::Var lv = ad::leaf(Tensor::from({1, 1, 1, 3}, {0.2, -0.4, 1.0}));
    auto build = [&] { return kl_loss({mu, lv}); };
    CHECK(reqvae::testing::gradcheck({mu, lv}, build).max_rel_err < 1e-4);
}

TEST_CASE("encode produces the advertised latent grid") {
    Autoencoder m(small_cfg(), 1);
    Tensor imgs = test_batch(2, 16, 7);
    LatentDistribution d = m.encode(ad::constant(imgs));
    CHECK(d.mean->value.shape() == Shape{2, 4, 2, 2});
    CHECK(d.logvar->value.shape() == Shape{2, 4, 2, 2});
    CHECK(d.logvar->value.min() >= -30.0);
    CHECK(d.logvar->value.max() <= 20.0);
}

TEST_CASE("decode maps latents back to bounded images") {
    Autoencoder m(small_cfg(), 1);
    Rng rng(9);
    Tensor z = Tensor::randn({1, 4, 2, 2}, rng);
    Tensor out = m.decode(ad::constant(z))->value;
    CHECK(out.shape() == Shape{1, 3, 16, 16});
    CHECK(out.min() >= -1.0);
    CHECK(out.max() <= 1.0);
}

TEST_CASE("indivisible input is rejected") {
    Autoencoder m(small_cfg(), 1);
    CHECK_THROWS_AS((void)m.encode(ad::constant(Tensor::zeros({1, 3, 12, 16}))), std::invalid_argument);
    CHECK_THROWS_AS((void)m.encode(ad::constant(Tensor::zeros({1, 4, 16, 16}))), std::invalid_argument);
}

TEST_CASE("same seed gives identical models, different seeds differ") {
    Autoencoder a(small_cfg(), 42), b(small_cfg(), 42), c(small_cfg(), 43);
    Tensor imgs = test_batch(1, 8, 3);
    Tensor za = a.encode_mean(imgs);
    CHECK(za.bit_equal(b.encode_mean(imgs)));
    CHECK_FALSE(za.bit_equal(c.encode_mean(imgs)));
}

TEST_CASE("reparameterize draws mean plus sigma noise deterministically") {
    LatentDistribution d;
    d.mean = ad::constant(Tensor::full({1, 1, 2, 2}, 3.0));
    d.logvar = ad::constant(Tensor::full({1, 1, 2, 2}, std::log(1e-12)));
    Rng rng(5);
    Tensor z = Autoencoder::reparameterize(d, rng)->value;
    for (int64_t i = 0; i < z.numel(); ++i) CHECK(z[i] == doctest::Approx(3.0).epsilon(1e-5));

    d.logvar = ad::constant(Tensor::zeros({1, 1, 2, 2}));
    Rng r1(8), r2(8);
    Tensor s1 = Autoencoder::reparameterize(d, r1)->value;
    Tensor s2 = Autoencoder::reparameterize(d, r2)->value;
    CHECK(s1.bit_equal(s2));
    CHECK_FALSE(s1.bit_equal(d.mean->value));
}

TEST_CASE("plain-tensor helpers match the var path and strip batch dims") {
    Autoencoder m(small_cfg(), 2);
    Tensor img3 = test_batch(1, 8, 4).reshaped({3, 8, 8});
    Tensor mean3 = m.encode_mean(img3);
    CHECK(mean3.shape() == Shape{4, 1, 1});

    Tensor img4 = img3.reshaped({1, 3, 8, 8});
    LatentDistribution d = m.encode(ad::constant(img4));
    CHECK(mean3.bit_equal(d.mean->value.reshaped({4, 1, 1})));

    Tensor dec3 = m.decode_plain(mean3);
    CHECK(dec3.shape() == Shape{3, 8, 8});
    CHECK(dec3.bit_equal(m.decode(d.mean)->value.reshaped({3, 8, 8})));
}

TEST_CASE("gradients flow from reconstruction to encoder weights") {
    EncoderConfig cfg = small_cfg();
    Autoencoder m(cfg, 6);
    Tensor imgs = test_batch(1, 8, 10);
    ad::Var x = ad::constant(imgs);
    LatentDistribution d = m.encode(x);
    ad::Var rec = ad::mse_loss(m.decode(d.mean), x);
    m.params().zero_grad();
    ad::backward(rec);
    ad::Var stem_w = m.params().get("enc.stem.w");
    REQUIRE(stem_w->grad.numel() == stem_w->value.numel());
    CHECK(stem_w->grad.abs_max() > 0.0);
}

TEST_CASE("latent channel count does not touch backbone parameter count") {
    EncoderConfig a = small_cfg(), b = small_cfg();
    a.latent_channels = 4;
    b.latent_channels = 16;
    Autoencoder ma(a, 1), mb(b, 1);
    // Only head / latent-adjacent convs may differ.
    int64_t diff = mb.params().numel() - ma.params().numel();
    CHECK(diff > 0);
    CHECK(diff < ma.params().numel() / 2);
}
