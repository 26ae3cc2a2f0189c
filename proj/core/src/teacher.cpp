#include "reqvae/teacher.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "reqvae/checkpoint.hpp"

namespace reqvae {

namespace {
constexpr double kNormEps = 1e-8;
}

Tensor Teacher::extract_plain(const Tensor& imgs, const std::vector<std::string>& ids) const {
    const bool single = imgs.ndim() == 3;
    const Tensor batch = single ? imgs.reshaped({1, imgs.size(0), imgs.size(1), imgs.size(2)}) : imgs;
    Tensor out = extract(ad::constant(batch), ids)->value;
    if (single) return out.reshaped({out.size(1), out.size(2), out.size(3)});
    return out;
}

namespace {

class BuiltinTeacher final : public Teacher {
public:
    explicit BuiltinTeacher(uint64_t seed) {
        Rng rng = Rng::derive(seed, 0x7ea0);
        c1_ = nn::Conv2d(ps_, "c1", 3, 16, 3, 2, ad::PadMode::zeros, rng);
        n1_ = nn::GroupNorm(ps_, "n1", 16);
        c2_ = nn::Conv2d(ps_, "c2", 16, 32, 3, 2, ad::PadMode::zeros, rng);
        n2_ = nn::GroupNorm(ps_, "n2", 32);
        c3_ = nn::Conv2d(ps_, "c3", 32, 64, 3, 1, ad::PadMode::zeros, rng);
        n3_ = nn::GroupNorm(ps_, "n3", 64);
        ps_.set_requires_grad(false);
    }

    int64_t feature_dim() const override { return 64; }
    bool differentiable() const override { return true; }

    ad::Var extract(const ad::Var& imgs, const std::vector<std::string>&) const override {
        if (imgs->value.ndim() != 4 || imgs->value.size(1) != 3)
            throw std::invalid_argument("teacher extract: expects [B,3,H,W], got " +
                                        shape_str(imgs->value.shape()));
        ad::Var h = ad::silu(n1_(c1_(imgs)));
        h = ad::silu(n2_(c2_(h)));
        return n3_(c3_(h));
    }

private:
    nn::ParamStore ps_;
    nn::Conv2d c1_, c2_, c3_;
    nn::GroupNorm n1_, n2_, n3_;
};

class FileTeacher final : public Teacher {
public:
    explicit FileTeacher(const std::string& path) : archive_(TensorArchive::load(path)) {
        dim_ = archive_.meta.at("feature_dim").get<int64_t>();
        grid_h_ = archive_.meta.at("grid_h").get<int64_t>();
        grid_w_ = archive_.meta.at("grid_w").get<int64_t>();
        for (const auto& [id, t] : archive_.tensors)
            if (t.ndim() != 3 || t.size(0) != dim_ || t.size(1) != grid_h_ || t.size(2) != grid_w_)
                throw std::runtime_error("file teacher: feature grid for '" + id + "' is " +
                                         shape_str(t.shape()) + ", declared [" + std::to_string(dim_) + "," +
                                         std::to_string(grid_h_) + "," + std::to_string(grid_w_) + "]");
    }

    int64_t feature_dim() const override { return dim_; }
    bool differentiable() const override { return false; }

    ad::Var extract(const ad::Var& imgs, const std::vector<std::string>& ids) const override {
        if (imgs->value.size(0) != static_cast<int64_t>(ids.size()))
            throw std::invalid_argument("file teacher: batch size does not match id count");
        Tensor out({static_cast<int64_t>(ids.size()), dim_, grid_h_, grid_w_});
        const int64_t stride = dim_ * grid_h_ * grid_w_;
        for (size_t i = 0; i < ids.size(); ++i) {
            auto it = archive_.tensors.find(ids[i]);
            if (it == archive_.tensors.end())
                throw std::runtime_error("file teacher: no features stored for image id '" + ids[i] + "'");
            std::copy(it->second.data(), it->second.data() + stride,
                      out.data() + static_cast<int64_t>(i) * stride);
        }
        return ad::constant(std::move(out));
    }

private:
    TensorArchive archive_;
    int64_t dim_, grid_h_, grid_w_;
};

}  // namespace

std::unique_ptr<Teacher> make_builtin_teacher(uint64_t seed) { return std::make_unique<BuiltinTeacher>(seed); }

std::unique_ptr<Teacher> load_file_teacher(const std::string& archive_path) {
    return std::make_unique<FileTeacher>(archive_path);
}

Tensor resample_to_grid(const Tensor& f, int64_t h, int64_t w) {
    if (h < 1 || w < 1) throw std::invalid_argument("resample_to_grid: target dims must be positive");
    return resize_bilinear_align_corners(f, h, w);
}

ad::Var cosine_align_loss(const ad::Var& z_proj, const Tensor& f, double m1) {
    if (m1 < 0.0 || m1 > 1.0) throw std::invalid_argument("cosine_align_loss: m1 must be in [0,1]");
    if (z_proj->value.ndim() != 2 || !z_proj->value.same_shape(f))
        throw std::invalid_argument("cosine_align_loss: token shapes differ: " +
                                    shape_str(z_proj->value.shape()) + " vs " + shape_str(f.shape()));
    const int64_t n = f.size(0), d = f.size(1);
    Tensor fnorm({n, 1});
    for (int64_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j) s += f.at(i, j) * f.at(i, j);
        fnorm.at(i, 0) = std::sqrt(s + kNormEps);
    }
    ad::Var fc = ad::constant(f);
    ad::Var dot = ad::sum_axis(ad::mul(z_proj, fc), 1);
    ad::Var zn = ad::sqrt(ad::offset(ad::sum_axis(ad::square(z_proj), 1), kNormEps));
    ad::Var cos = ad::div(dot, ad::mul(zn, ad::constant(fnorm)));
    return ad::mean_all(ad::relu(ad::offset(ad::neg(cos), 1.0 - m1)));
}

ad::Var distance_align_loss(const ad::Var& z_tokens, const Tensor& f_tokens, double m2) {
    if (m2 < 0.0 || m2 > 1.0) throw std::invalid_argument("distance_align_loss: m2 must be in [0,1]");
    if (z_tokens->value.ndim() != 2 || f_tokens.ndim() != 2 || z_tokens->value.size(0) != f_tokens.size(0))
        throw std::invalid_argument("distance_align_loss: token counts differ: " +
                                    shape_str(z_tokens->value.shape()) + " vs " + shape_str(f_tokens.shape()));
    const int64_t n = f_tokens.size(0), d = f_tokens.size(1);

    Tensor cf({n, n});
    {
        Tensor fn({n, 1});
        for (int64_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) s += f_tokens.at(i, j) * f_tokens.at(i, j);
            fn.at(i, 0) = std::sqrt(s + kNormEps);
        }
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j) {
                double dot = 0.0;
                for (int64_t k = 0; k < d; ++k) dot += f_tokens.at(i, k) * f_tokens.at(j, k);
                cf.at(i, j) = dot / (fn.at(i, 0) * fn.at(j, 0));
            }
    }

    ad::Var zn = ad::div(z_tokens, ad::sqrt(ad::offset(ad::sum_axis(ad::square(z_tokens), 1), kNormEps)));
    ad::Var cz = ad::matmul(zn, ad::transpose2d(zn));
    return ad::mean_all(ad::relu(ad::offset(ad::abs(ad::sub(cz, ad::constant(cf))), -m2)));
}

std::vector<int64_t> subsample_tokens(int64_t n, int64_t cap, Rng& rng) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    if (n <= cap) return idx;
    rng.shuffle(idx);
    idx.resize(static_cast<size_t>(cap));
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace reqvae
