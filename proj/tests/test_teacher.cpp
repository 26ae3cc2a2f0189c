#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <stdexcept>

#include "doctest.h"
#include "gradcheck.hpp"
#include "reqvae/checkpoint.hpp"
#include "reqvae/teacher.hpp"

using namespace reqvae;
namespace fs = std::filesystem;

namespace {

Tensor rows2(double a0, double a1, double b0, double b1) { return Tensor::from({2, 2}, {a0, a1, b0, b1}); }

double loss_value(const ad::Var& v) { return v->value[0]; }

}  // namespace

TEST_CASE("builtin teacher emits a quarter-resolution 64-channel grid") {
    auto t = make_builtin_teacher(3);
    CHECK(t->feature_dim() == 64);
    CHECK(t->differentiable());
    Rng rng(1);
    Tensor imgs = Tensor::rand_uniform({2, 3, 16, 16}, rng, -1.0, 1.0);
    Tensor f = t->extract_plain(imgs, {"a", "b"});
    CHECK(f.shape() == Shape{2, 64, 4, 4});
    CHECK(f.all_finite());
}

TEST_CASE("builtin teacher is seed-reproducible and frozen") {
    auto t1 = make_builtin_teacher(7);
    auto t2 = make_builtin_teacher(7);
    auto t3 = make_builtin_teacher(8);
    Rng rng(2);
    Tensor img = Tensor::rand_uniform({1, 3, 8, 8}, rng, -1.0, 1.0);
    Tensor f1 = t1->extract_plain(img, {"x"});
    CHECK(f1.bit_equal(t2->extract_plain(img, {"x"})));
    CHECK_FALSE(f1.bit_equal(t3->extract_plain(img, {"x"})));

    // Differentiable w.r.t. input, parameters stay out of the tape.
    ad::Var in = ad::leaf(img);
    ad::Var out = t1->extract(in, {"x"});
    ad::backward(ad::mean_all(ad::square(out)));
    CHECK(in->grad.numel() == in->value.numel());
    CHECK(in->grad.abs_max() > 0.0);
}

TEST_CASE("resample_to_grid corner alignment") {
    Tensor f = Tensor::from({1, 2, 2}, {0, 1, 2, 3});
    Tensor r = resample_to_grid(f, 3, 3);
    CHECK(r.shape() == Shape{1, 3, 3});
    CHECK(r.at(0, 0, 0) == doctest::Approx(0.0));
    CHECK(r.at(0, 2, 2) == doctest::Approx(3.0));
    CHECK(r.at(0, 1, 1) == doctest::Approx(1.5));
    CHECK(resample_to_grid(f, 2, 2).bit_equal(f));

    Tensor batched = f.reshaped({1, 1, 2, 2});
    CHECK(resample_to_grid(batched, 3, 3).shape() == Shape{1, 1, 3, 3});
}

TEST_CASE("cosine alignment oracle values") {
    // Orthogonal pair, no margin slack: cos = 0, penalty 1.
    ad::Var z = ad::constant(Tensor::from({1, 2}, {1, 0}));
    Tensor f = Tensor::from({1, 2}, {0, 1});
    CHECK(loss_value(cosine_align_loss(z, f, 0.0)) == doctest::Approx(1.0).epsilon(1e-9));

    // Anti-parallel with margin 0.5: 1 - 0.5 - (-1) = 1.5.
    ad::Var zn = ad::constant(Tensor::from({1, 2}, {-2, 0}));
    Tensor fp = Tensor::from({1, 2}, {3, 0});
    CHECK(loss_value(cosine_align_loss(zn, fp, 0.5)) == doctest::Approx(1.5).epsilon(1e-9));

    // Perfect alignment is inside the margin: zero.
    CHECK(loss_value(cosine_align_loss(ad::constant(fp), fp, 0.1)) == doctest::Approx(0.0));
}

TEST_CASE("distance alignment oracle values") {
    ad::Var z = ad::constant(rows2(1, 0, 0, 1));
    Tensor f = rows2(1, 0, 1, 0);
    // Diagonal pairs agree; the two off-diagonal pairs each violate by 1.
    // The stabilizing epsilon in the norms shows up at the 1e-8 level.
    CHECK(loss_value(distance_align_loss(z, f, 0.0)) == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(loss_value(distance_align_loss(z, f, 1.0)) == doctest::Approx(0.0));
}

TEST_CASE("alignment losses respect analytic bounds") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor zt = Tensor::randn({6, 4}, rng);
        Tensor ft = Tensor::randn({6, 4}, rng);
        const double m1 = rng.uniform(0.0, 0.9);
        const double m2 = rng.uniform(0.0, 0.9);
        const double c = loss_value(cosine_align_loss(ad::constant(zt), ft, m1));
        const double d = loss_value(distance_align_loss(ad::constant(zt), ft, m2));
        CHECK(c >= 0.0);
        CHECK(c <= 2.0 - m1 + 1e-12);
        CHECK(d >= 0.0);
        CHECK(d <= 2.0 - m2 + 1e-12);
    }
}

TEST_CASE("alignment losses are scale invariant") {
    Rng rng(13);
    Tensor zt = Tensor::randn({5, 3}, rng);
    Tensor ft = Tensor::randn({5, 3}, rng);
    Tensor zs = zt;
    zs.mul_(3.7);
    const double c0 = loss_value(cosine_align_loss(ad::constant(zt), ft, 0.3));
    const double c1 = loss_value(cosine_align_loss(ad::constant(zs), ft, 0.3));
    CHECK(std::abs(c0 - c1) < 1e-6);
    const double d0 = loss_value(distance_align_loss(ad::constant(zt), ft, 0.2));
    const double d1 = loss_value(distance_align_loss(ad::constant(zs), ft, 0.2));
    CHECK(std::abs(d0 - d1) < 1e-6);
}

TEST_CASE("alignment gradients match finite differences away from kinks") {
    Rng rng(17);
    ad::Var z = ad::leaf(Tensor::randn({4, 3}, rng));
    Tensor f = Tensor::randn({4, 3}, rng);
    // Margins of zero keep every pair strictly inside the hinge's active
    // region with probability ~1 for random draws.
    auto bc = [&] { return cosine_align_loss(z, f, 0.0); };
    CHECK(reqvae::testing::gradcheck({z}, bc).max_rel_err < 1e-4);
    auto bd = [&] { return distance_align_loss(z, f, 0.0); };
    CHECK(reqvae::testing::gradcheck({z}, bd).max_rel_err < 1e-4);
}

TEST_CASE("subsample_tokens caps without replacement") {
    Rng r1(5), r2(5);
    auto idx = subsample_tokens(100, 16, r1);
    CHECK(idx.size() == 16);
    std::set<int64_t> uniq(idx.begin(), idx.end());
    CHECK(uniq.size() == 16);
    CHECK(*std::min_element(idx.begin(), idx.end()) >= 0);
    CHECK(*std::max_element(idx.begin(), idx.end()) < 100);
    CHECK(subsample_tokens(100, 16, r2) == idx);

    auto all = subsample_tokens(5, 16, r1);
    CHECK(all == std::vector<int64_t>{0, 1, 2, 3, 4});
}

TEST_CASE("file teacher serves stored grids and rejects unknown ids") {
    fs::path dir = fs::temp_directory_path() / ("reqvae_teacher_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    const std::string path = (dir / "feats.rqta").string();

    TensorArchive a;
    a.meta = {{"kind", "teacher_features"}, {"feature_dim", 6}, {"grid_h", 2}, {"grid_w", 2}};
    Rng rng(23);
    a.tensors["img_000"] = Tensor::randn({6, 2, 2}, rng);
    a.tensors["img_001"] = Tensor::randn({6, 2, 2}, rng);
    a.save(path);

    auto t = load_file_teacher(path);
    CHECK(t->feature_dim() == 6);
    CHECK_FALSE(t->differentiable());
    Tensor imgs = Tensor::zeros({2, 3, 8, 8});
    Tensor f = t->extract_plain(imgs, {"img_001", "img_000"});
    CHECK(f.shape() == Shape{2, 6, 2, 2});
    CHECK(f.at(0, 0, 0, 0) == a.tensors["img_001"].at(0, 0, 0));

    CHECK_THROWS_WITH_AS((void)t->extract_plain(imgs, {"img_000", "img_999"}),
                         doctest::Contains("img_999"), std::runtime_error);
    fs::remove_all(dir);
}
