#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "reqvae/rng.hpp"

namespace reqvae {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

/// Dense row-major double tensor. The single numeric container of the
/// project; all layers, losses and metrics operate on it. NCHW layout by
/// convention for image/latent grids.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value) { return full({1}, value); }
    static Tensor from(Shape shape, std::initializer_list<double> values);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
    static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi);

    const Shape& shape() const { return shape_; }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t size(int64_t dim) const;
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    /// Element access for 2-4d tensors (row-major).
    double& at(int64_t i, int64_t j);
    double at(int64_t i, int64_t j) const;
    double& at(int64_t i, int64_t j, int64_t k);
    double at(int64_t i, int64_t j, int64_t k) const;
    double& at(int64_t i, int64_t j, int64_t k, int64_t l);
    double at(int64_t i, int64_t j, int64_t k, int64_t l) const;

    Tensor reshaped(Shape new_shape) const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    double sum() const;
    double mean() const;
    double min() const;
    double max() const;
    double abs_max() const;
    bool all_finite() const;
    bool bit_equal(const Tensor& other) const;

    Tensor& add_(const Tensor& other);       // elementwise, same shape
    Tensor& mul_(double s);
    Tensor& clamp_(double lo, double hi);

private:
    Shape shape_;
    std::vector<double> data_;
};

/// Squared L2 distance summed over all elements; shapes must match.
double sq_dist(const Tensor& a, const Tensor& b);

/// Bilinear resize of the spatial (last two) dims of a [..., H, W] tensor,
/// corner-aligned: output corners sample input corners exactly.
Tensor resize_bilinear_align_corners(const Tensor& t, int64_t out_h, int64_t out_w);

/// Antialiased resize (pixel-area box filter) of a [..., H, W] tensor.
/// Exact 2x downscale degenerates to 2x2 averaging.
Tensor resize_area(const Tensor& t, int64_t out_h, int64_t out_w);

}  // namespace reqvae
