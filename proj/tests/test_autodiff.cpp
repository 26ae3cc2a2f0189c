#include <cmath>
#include <memory>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "reqvae/autodiff.hpp"
#include "reqvae/rng.hpp"
#include "reqvae/tensor.hpp"

using namespace reqvae;
using reqvae::testing::gradcheck;

namespace {

ad::Var randn_leaf(Shape shape, uint64_t seed, double stddev = 1.0) {
    Rng rng(seed);
    return ad::leaf(Tensor::randn(std::move(shape), rng, stddev));
}

}  // namespace

TEST_CASE("forward values of basic ops") {
    ad::Var a = ad::constant(Tensor::from({2}, {1.0, -2.0}));
    ad::Var b = ad::constant(Tensor::from({2}, {3.0, 5.0}));
    CHECK(ad::add(a, b)->value[1] == 3.0);
    CHECK(ad::mul(a, b)->value[0] == 3.0);
    CHECK(ad::relu(a)->value[1] == 0.0);
    CHECK(ad::abs(a)->value[1] == 2.0);
    CHECK(ad::mean_all(b)->value[0] == 4.0);
    CHECK(ad::sum_all(a)->value[0] == -1.0);
    CHECK(ad::mse_loss(a, b)->value[0] == doctest::Approx(0.5 * (4.0 + 49.0)));
    CHECK(ad::l1_loss(a, b)->value[0] == doctest::Approx(0.5 * (2.0 + 7.0)));
}

TEST_CASE("broadcasting aligns trailing axes") {
    ad::Var x = ad::constant(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
    ad::Var row = ad::constant(Tensor::from({3}, {10, 20, 30}));
    Tensor out = ad::add(x, row)->value;
    CHECK(out.at(0, 2) == 33.0);
    CHECK(out.at(1, 0) == 14.0);

    ad::Var col = ad::constant(Tensor::from({2, 1}, {100, 200}));
    CHECK(ad::add(x, col)->value.at(1, 1) == 205.0);
}

TEST_CASE("backward accumulates into shared leaves") {
    ad::Var x = ad::leaf(Tensor::from({2}, {3.0, -1.0}));
    ad::Var y = ad::add(ad::mul(x, x), ad::scale(x, 2.0));
    ad::backward(ad::sum_all(y));
    CHECK(x->grad[0] == doctest::Approx(2.0 * 3.0 + 2.0));
    CHECK(x->grad[1] == doctest::Approx(2.0 * -1.0 + 2.0));
}

TEST_CASE("constant subgraphs carry no tape") {
    ad::Var c = ad::constant(Tensor::from({2}, {1, 2}));
    ad::Var d = ad::mul(c, c);
    CHECK_FALSE(d->requires_grad);
    CHECK(d->parents.empty());

    ad::Var l = ad::leaf(Tensor::from({2}, {1, 2}));
    ad::Var m = ad::mul(l, c);
    CHECK(m->requires_grad);
    ad::Var det = ad::detach(m);
    CHECK_FALSE(det->requires_grad);
}

TEST_CASE("gradcheck elementwise chain") {
    ad::Var x = randn_leaf({3, 4}, 1);
    ad::Var y = randn_leaf({3, 4}, 2);
    auto build = [&] {
        ad::Var t = ad::mul(ad::sigmoid(x), ad::tanh(y));
        t = ad::add(t, ad::silu(ad::sub(x, y)));
        t = ad::add(t, ad::exp(ad::scale(x, 0.3)));
        return ad::mean_all(ad::square(t));
    };
    auto r = gradcheck({x, y}, build);
    CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck log sqrt div away from zero") {
    Rng rng(3);
    ad::Var x = ad::leaf(Tensor::rand_uniform({8}, rng, 0.5, 2.0));
    ad::Var y = ad::leaf(Tensor::rand_uniform({8}, rng, 0.5, 2.0));
    auto build = [&] { return ad::mean_all(ad::div(ad::log(x), ad::sqrt(y))); };
    auto r = gradcheck({x, y}, build);
    CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck clamp and relu away from kinks") {
    Tensor v = Tensor::from({4}, {-2.0, -0.5, 0.5, 2.0});
    ad::Var x = ad::leaf(v);
    auto build = [&] { return ad::sum_all(ad::add(ad::clamp(x, -1.0, 1.0), ad::relu(x))); };
    auto r = gradcheck({x}, build, 1e-6);
    CHECK(r.max_rel_err < 1e-4);
    CHECK(x->grad.numel() == 0);
}

TEST_CASE("gradcheck leaky_relu slope") {
    ad::Var x = ad::leaf(Tensor::from({2}, {-1.0, 2.0}));
    ad::Var loss = ad::sum_all(ad::leaky_relu(x, 0.2));
    ad::backward(loss);
    CHECK(x->grad[0] == doctest::Approx(0.2));
    CHECK(x->grad[1] == doctest::Approx(1.0));
}

TEST_CASE("gradcheck reductions and broadcast backward") {
    ad::Var x = randn_leaf({2, 3}, 4);
    ad::Var b = randn_leaf({3}, 5);
    auto build = [&] {
        ad::Var s = ad::mean_axis(ad::mul(x, b), 0, false);
        ad::Var t = ad::sum_axis(ad::add(x, b), 1);
        return ad::add(ad::sum_all(ad::square(t)), ad::mean_all(s));
    };
    auto r = gradcheck({x, b}, build);
    CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck matmul and transpose") {
    ad::Var a = randn_leaf({3, 4}, 6);
    ad::Var b = randn_leaf({4, 2}, 7);
    auto build = [&] { return ad::mean_all(ad::square(ad::matmul(a, b))); };
    CHECK(gradcheck({a, b}, build).max_rel_err < 1e-4);

    auto build_t = [&] { return ad::sum_all(ad::mul(ad::transpose2d(a), ad::constant(Tensor::full({4, 3}, 0.5)))); };
    CHECK(gradcheck({a}, build_t).max_rel_err < 1e-4);
}

TEST_CASE("gradcheck shape ops") {
    ad::Var x = randn_leaf({2, 3, 2}, 8);
    auto build = [&] {
        ad::Var p = ad::permute(x, {2, 0, 1});
        ad::Var r = ad::reshape(p, {4, 3});
        ad::Var s = ad::slice(r, 0, 1, 2);
        return ad::mean_all(ad::square(s));
    };
    CHECK(gradcheck({x}, build).max_rel_err < 1e-4);
}

TEST_CASE("gradcheck concat and gather_rows") {
    ad::Var a = randn_leaf({2, 3}, 9);
    ad::Var b = randn_leaf({2, 3}, 10);
    auto build = [&] {
        ad::Var c = ad::concat({a, b}, 0);
        ad::Var g = ad::gather_rows(c, {0, 3, 3});
        return ad::mean_all(ad::square(g));
    };
    CHECK(gradcheck({a, b}, build).max_rel_err < 1e-4);
}

TEST_CASE("gather pads negative map entries with zero") {
    ad::Var a = ad::leaf(Tensor::from({3}, {5, 6, 7}));
    auto map = std::make_shared<const std::vector<int64_t>>(std::vector<int64_t>{2, -1, 0});
    ad::Var g = ad::gather(a, map, {3});
    CHECK(g->value[0] == 7.0);
    CHECK(g->value[1] == 0.0);
    ad::backward(ad::sum_all(g));
    CHECK(a->grad[0] == 1.0);
    CHECK(a->grad[1] == 0.0);
    CHECK(a->grad[2] == 1.0);
}

TEST_CASE("conv2d forward matches hand computation") {
    // 1x1x3x3 input, 1x1x3x3 kernel of ones, zero padding: center output
    // sums the whole input.
    Tensor img = Tensor::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    ad::Var x = ad::constant(img);
    ad::Var w = ad::constant(Tensor::full({1, 1, 3, 3}, 1.0));
    Tensor out = ad::conv2d(x, w, nullptr, 1, ad::PadMode::zeros)->value;
    CHECK(out.shape() == Shape{1, 1, 3, 3});
    CHECK(out.at(0, 0, 1, 1) == doctest::Approx(45.0));
    CHECK(out.at(0, 0, 0, 0) == doctest::Approx(1 + 2 + 4 + 5));

    Tensor outc = ad::conv2d(x, w, nullptr, 1, ad::PadMode::circular)->value;
    CHECK(outc.at(0, 0, 0, 0) == doctest::Approx(45.0));
}

TEST_CASE("conv2d stride halves spatial dims") {
    ad::Var x = ad::constant(Tensor::zeros({1, 2, 4, 4}));
    Rng rng(20);
    ad::Var w = ad::constant(Tensor::randn({3, 2, 3, 3}, rng));
    ad::Var b = ad::constant(Tensor::zeros({3}));
    CHECK(ad::conv2d(x, w, b, 2, ad::PadMode::zeros)->value.shape() == Shape{1, 3, 2, 2});
}

TEST_CASE("gradcheck conv2d both pads and strides") {
    for (auto pad : {ad::PadMode::zeros, ad::PadMode::circular}) {
        for (int64_t stride : {int64_t{1}, int64_t{2}}) {
            ad::Var x = randn_leaf({1, 2, 4, 4}, 21 + stride);
            ad::Var w = randn_leaf({2, 2, 3, 3}, 23 + stride, 0.5);
            ad::Var b = randn_leaf({2}, 25);
            auto build = [&] { return ad::mean_all(ad::square(ad::conv2d(x, w, b, stride, pad))); };
            auto r = gradcheck({x, w, b}, build, 1e-5, 32);
            CHECK(r.max_rel_err < 1e-4);
        }
    }
}

TEST_CASE("upsample_nearest2 repeats pixels") {
    ad::Var x = ad::constant(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}));
    Tensor u = ad::upsample_nearest2(x)->value;
    CHECK(u.shape() == Shape{1, 1, 4, 4});
    CHECK(u.at(0, 0, 0, 1) == 1.0);
    CHECK(u.at(0, 0, 3, 3) == 4.0);
}

TEST_CASE("upsample_bilinear2 half-pixel row profile") {
    ad::Var x = ad::constant(Tensor::from({1, 1, 1, 2}, {1, 2}));
    Tensor u = ad::upsample_bilinear2(x)->value;
    CHECK(u.shape() == Shape{1, 1, 2, 4});
    CHECK(u.at(0, 0, 0, 0) == doctest::Approx(1.0));
    CHECK(u.at(0, 0, 0, 1) == doctest::Approx(1.25));
    CHECK(u.at(0, 0, 0, 2) == doctest::Approx(1.75));
    CHECK(u.at(0, 0, 0, 3) == doctest::Approx(2.0));
}

TEST_CASE("gradcheck upsample and avg_pool") {
    ad::Var x = randn_leaf({1, 2, 2, 2}, 30);
    auto b1 = [&] { return ad::mean_all(ad::square(ad::upsample_nearest2(x))); };
    auto b2 = [&] { return ad::mean_all(ad::square(ad::upsample_bilinear2(x))); };
    CHECK(gradcheck({x}, b1).max_rel_err < 1e-4);
    CHECK(gradcheck({x}, b2).max_rel_err < 1e-4);

    ad::Var y = randn_leaf({1, 2, 4, 4}, 31);
    auto b3 = [&] { return ad::mean_all(ad::square(ad::avg_pool(y, 2))); };
    CHECK(gradcheck({y}, b3).max_rel_err < 1e-4);
    CHECK(ad::avg_pool(y, 2)->value.shape() == Shape{1, 2, 2, 2});
}

TEST_CASE("group_norm normalizes per group") {
    ad::Var x = randn_leaf({2, 4, 3, 3}, 32);
    ad::Var gamma = ad::constant(Tensor::full({4}, 1.0));
    ad::Var beta = ad::constant(Tensor::zeros({4}));
    Tensor out = ad::group_norm(x, gamma, beta, 2)->value;
    // Each (batch, group) slab should be ~zero-mean unit-variance.
    for (int64_t b = 0; b < 2; ++b) {
        double acc = 0.0, sq = 0.0;
        int64_t n = 0;
        for (int64_t c = 0; c < 2; ++c)
            for (int64_t i = 0; i < 3; ++i)
                for (int64_t j = 0; j < 3; ++j) {
                    double v = out.at(b, c, i, j);
                    acc += v;
                    sq += v * v;
                    ++n;
                }
        CHECK(acc / n == doctest::Approx(0.0).epsilon(1e-6));
        CHECK(sq / n == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("gradcheck group_norm with affine") {
    ad::Var x = randn_leaf({1, 4, 2, 2}, 33);
    ad::Var gamma = randn_leaf({4}, 34, 0.5);
    ad::Var beta = randn_leaf({4}, 35, 0.5);
    auto build = [&] { return ad::mean_all(ad::square(ad::group_norm(x, gamma, beta, 2))); };
    CHECK(gradcheck({x, gamma, beta}, build, 1e-5, 48).max_rel_err < 1e-4);
}

TEST_CASE("shape mismatches throw") {
    ad::Var a = ad::constant(Tensor::zeros({2, 3}));
    ad::Var b = ad::constant(Tensor::zeros({3, 2}));
    CHECK_THROWS_AS((void)ad::add(a, b), std::invalid_argument);
    CHECK_THROWS_AS((void)ad::matmul(a, a), std::invalid_argument);
    CHECK_THROWS_AS((void)ad::concat({a, b}, 0), std::invalid_argument);
}
