#include "reqvae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace reqvae {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
        throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values) {
    return Tensor(std::move(shape), std::vector<double>(values));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = rng.normal() * stddev;
    return t;
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = rng.uniform(lo, hi);
    return t;
}

int64_t Tensor::size(int64_t dim) const {
    if (dim < 0) dim += ndim();
    if (dim < 0 || dim >= ndim()) throw std::out_of_range("tensor dim out of range");
    return shape_[static_cast<size_t>(dim)];
}

double& Tensor::at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
double Tensor::at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
double& Tensor::at(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
}
double Tensor::at(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
}
double& Tensor::at(int64_t i, int64_t j, int64_t k, int64_t l) {
    return data_[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
}
double Tensor::at(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return data_[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
}

Tensor Tensor::reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
        throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                                    " changes element count");
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

double Tensor::mean() const { return numel() ? sum() / static_cast<double>(numel()) : 0.0; }

double Tensor::min() const {
    double m = std::numeric_limits<double>::infinity();
    for (double v : data_) m = std::min(m, v);
    return m;
}

double Tensor::max() const {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : data_) m = std::max(m, v);
    return m;
}

double Tensor::abs_max() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

bool Tensor::bit_equal(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

Tensor& Tensor::add_(const Tensor& other) {
    if (!same_shape(other)) throw std::invalid_argument("add_: shape mismatch");
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::mul_(double s) {
    for (auto& v : data_) v *= s;
    return *this;
}

Tensor& Tensor::clamp_(double lo, double hi) {
    for (auto& v : data_) v = std::clamp(v, lo, hi);
    return *this;
}

double sq_dist(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("sq_dist: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

namespace {

void spatial_dims(const Tensor& t, int64_t& lead, int64_t& h, int64_t& w) {
    if (t.ndim() < 2) throw std::invalid_argument("resize expects >=2 dims, got " + shape_str(t.shape()));
    h = t.size(-2);
    w = t.size(-1);
    lead = t.numel() / (h * w);
}

Shape with_spatial(const Shape& in, int64_t h, int64_t w) {
    Shape out = in;
    out[out.size() - 2] = h;
    out[out.size() - 1] = w;
    return out;
}

}  // namespace

Tensor resize_bilinear_align_corners(const Tensor& t, int64_t out_h, int64_t out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize target must be >= 1x1");
    int64_t lead, h, w;
    spatial_dims(t, lead, h, w);
    Tensor out(with_spatial(t.shape(), out_h, out_w));
    const double sy = out_h > 1 ? static_cast<double>(h - 1) / static_cast<double>(out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(w - 1) / static_cast<double>(out_w - 1) : 0.0;
    for (int64_t l = 0; l < lead; ++l) {
        const double* src = t.data() + l * h * w;
        double* dst = out.data() + l * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            const double fy = sy * oy;
            const int64_t y0 = static_cast<int64_t>(fy);
            const int64_t y1 = std::min(y0 + 1, h - 1);
            const double wy = fy - y0;
            for (int64_t ox = 0; ox < out_w; ++ox) {
                const double fx = sx * ox;
                const int64_t x0 = static_cast<int64_t>(fx);
                const int64_t x1 = std::min(x0 + 1, w - 1);
                const double wx = fx - x0;
                dst[oy * out_w + ox] = (1 - wy) * ((1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1]) +
                                       wy * ((1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
            }
        }
    }
    return out;
}

Tensor resize_area(const Tensor& t, int64_t out_h, int64_t out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize target must be >= 1x1");
    int64_t lead, h, w;
    spatial_dims(t, lead, h, w);
    if (out_h == h && out_w == w) return t;
    Tensor out(with_spatial(t.shape(), out_h, out_w));
    const double ry = static_cast<double>(h) / static_cast<double>(out_h);
    const double rx = static_cast<double>(w) / static_cast<double>(out_w);
    for (int64_t l = 0; l < lead; ++l) {
        const double* src = t.data() + l * h * w;
        double* dst = out.data() + l * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            const double y_lo = oy * ry, y_hi = (oy + 1) * ry;
            const int64_t iy0 = static_cast<int64_t>(y_lo);
            const int64_t iy1 = std::min(static_cast<int64_t>(std::ceil(y_hi)), h);
            for (int64_t ox = 0; ox < out_w; ++ox) {
                const double x_lo = ox * rx, x_hi = (ox + 1) * rx;
                const int64_t ix0 = static_cast<int64_t>(x_lo);
                const int64_t ix1 = std::min(static_cast<int64_t>(std::ceil(x_hi)), w);
                double acc = 0.0, area = 0.0;
                for (int64_t y = iy0; y < iy1; ++y) {
                    const double cy = std::min(y_hi, static_cast<double>(y + 1)) - std::max(y_lo, static_cast<double>(y));
                    for (int64_t x = ix0; x < ix1; ++x) {
                        const double cx =
                            std::min(x_hi, static_cast<double>(x + 1)) - std::max(x_lo, static_cast<double>(x));
                        acc += cy * cx * src[y * w + x];
                        area += cy * cx;
                    }
                }
                dst[oy * out_w + ox] = acc / area;
            }
        }
    }
    return out;
}

}  // namespace reqvae
