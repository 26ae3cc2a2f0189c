#include "reqvae/transforms.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace reqvae {

TransformSpec TransformSpec::rot90(int k) {
    if (k < 1 || k > 3) throw std::invalid_argument("rot90: quarter turns must be 1..3, got " + std::to_string(k));
    TransformSpec t;
    t.kind = TransformKind::rot90;
    t.k = k;
    return t;
}

TransformSpec TransformSpec::shift(int64_t dy, int64_t dx, ShiftBoundary b) {
    TransformSpec t;
    t.kind = TransformKind::shift;
    t.dy = dy;
    t.dx = dx;
    t.boundary = b;
    return t;
}

TransformSpec TransformSpec::rescale(double s) {
    if (s != 0.5 && s != 2.0) throw std::invalid_argument("rescale: factor must be 0.5 or 2.0");
    TransformSpec t;
    t.kind = TransformKind::rescale;
    t.scale = s;
    return t;
}

bool TransformSpec::exact() const {
    if (kind == TransformKind::rescale) return false;
    if (kind == TransformKind::shift && boundary == ShiftBoundary::crop) return false;
    return true;
}

std::string TransformSpec::str() const {
    switch (kind) {
        case TransformKind::identity: return "identity";
        case TransformKind::flip_h: return "flip_h";
        case TransformKind::flip_v: return "flip_v";
        case TransformKind::rot90: return "rot90:" + std::to_string(k);
        case TransformKind::shift:
            return "shift:" + std::to_string(dy) + "," + std::to_string(dx) +
                   (boundary == ShiftBoundary::circular ? ":circular" : ":crop");
        case TransformKind::rescale: {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "rescale:%g", scale);
            return buf;
        }
    }
    throw std::logic_error("unreachable transform kind");
}

TransformSpec TransformSpec::parse(const std::string& s) {
    auto fail = [&] { throw std::invalid_argument("unparseable transform: '" + s + "'"); };
    if (s == "identity") return identity();
    if (s == "flip_h") return flip_h();
    if (s == "flip_v") return flip_v();
    const size_t c1 = s.find(':');
    if (c1 == std::string::npos) fail();
    const std::string head = s.substr(0, c1);
    const std::string rest = s.substr(c1 + 1);
    try {
        if (head == "rot90") return rot90(std::stoi(rest));
        if (head == "rescale") return rescale(std::stod(rest));
        if (head == "shift") {
            const size_t comma = rest.find(',');
            if (comma == std::string::npos) fail();
            const size_t c2 = rest.find(':', comma);
            const int64_t dy = std::stoll(rest.substr(0, comma));
            const int64_t dx = std::stoll(rest.substr(comma + 1, c2 == std::string::npos ? std::string::npos : c2 - comma - 1));
            ShiftBoundary b = ShiftBoundary::circular;
            if (c2 != std::string::npos) {
                const std::string bs = rest.substr(c2 + 1);
                if (bs == "circular")
                    b = ShiftBoundary::circular;
                else if (bs == "crop")
                    b = ShiftBoundary::crop;
                else
                    fail();
            }
            return shift(dy, dx, b);
        }
    } catch (const std::invalid_argument&) {
        fail();
    } catch (const std::out_of_range&) {
        fail();
    }
    fail();
    return {};
}

TransformSpec invert(const TransformSpec& t) {
    switch (t.kind) {
        case TransformKind::identity:
        case TransformKind::flip_h:
        case TransformKind::flip_v: return t;
        case TransformKind::rot90: return TransformSpec::rot90(4 - t.k);
        case TransformKind::shift: return TransformSpec::shift(-t.dy, -t.dx, t.boundary);
        case TransformKind::rescale:
            throw std::invalid_argument("rescale is non-invertible under exact arithmetic");
    }
    throw std::logic_error("unreachable transform kind");
}

namespace {

struct Dims {
    int64_t lead, h, w;
};

Dims trailing_dims(const Shape& s) {
    if (s.size() < 2) throw std::invalid_argument("transform input needs at least 2 dims, got " + shape_str(s));
    Dims d;
    d.h = s[s.size() - 2];
    d.w = s[s.size() - 1];
    d.lead = 1;
    for (size_t i = 0; i + 2 < s.size(); ++i) d.lead *= s[i];
    return d;
}

int64_t wrap(int64_t i, int64_t n) {
    i %= n;
    return i < 0 ? i + n : i;
}

void scaled_shift(const TransformSpec& t, int64_t divisor, int64_t& dy, int64_t& dx) {
    if (t.dy % divisor || t.dx % divisor)
        throw std::invalid_argument("shift " + t.str() + " not divisible by factor " + std::to_string(divisor));
    dy = t.dy / divisor;
    dx = t.dx / divisor;
}

}  // namespace

Shape transformed_shape(const Shape& in, const TransformSpec& t, int64_t divisor) {
    const Dims d = trailing_dims(in);
    Shape out = in;
    switch (t.kind) {
        case TransformKind::identity:
        case TransformKind::flip_h:
        case TransformKind::flip_v: return out;
        case TransformKind::shift: {
            int64_t dy, dx;
            scaled_shift(t, divisor, dy, dx);
            return out;
        }
        case TransformKind::rot90:
            if (t.k != 2 && d.h != d.w)
                throw std::invalid_argument("rot90:" + std::to_string(t.k) + " needs square input, got " +
                                            shape_str(in));
            if (t.k != 2) std::swap(out[out.size() - 2], out[out.size() - 1]);
            return out;
        case TransformKind::rescale: {
            if (t.scale == 0.5 && (d.h % 2 || d.w % 2))
                throw std::invalid_argument("rescale:0.5 needs even dims, got " + shape_str(in));
            const auto sc = [&](int64_t n) { return t.scale == 0.5 ? n / 2 : n * 2; };
            out[out.size() - 2] = sc(d.h);
            out[out.size() - 1] = sc(d.w);
            return out;
        }
    }
    throw std::logic_error("unreachable transform kind");
}

std::vector<int64_t> build_index_map(const Shape& in, const TransformSpec& t, int64_t divisor) {
    if (t.kind == TransformKind::rescale)
        throw std::invalid_argument("rescale has no index map (resampling transform)");
    const Shape os = transformed_shape(in, t, divisor);
    const Dims d = trailing_dims(in);
    const int64_t oh = os[os.size() - 2], ow = os[os.size() - 1];
    int64_t dy = 0, dx = 0;
    if (t.kind == TransformKind::shift) scaled_shift(t, divisor, dy, dx);

    std::vector<int64_t> map(static_cast<size_t>(d.lead * oh * ow));
    for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
            int64_t sy = oy, sx = ox;
            bool valid = true;
            switch (t.kind) {
                case TransformKind::identity: break;
                case TransformKind::flip_h: sx = d.w - 1 - ox; break;
                case TransformKind::flip_v: sy = d.h - 1 - oy; break;
                case TransformKind::rot90:
                    if (t.k == 1) {
                        sy = ox;
                        sx = d.w - 1 - oy;
                    } else if (t.k == 2) {
                        sy = d.h - 1 - oy;
                        sx = d.w - 1 - ox;
                    } else {
                        sy = d.h - 1 - ox;
                        sx = oy;
                    }
                    break;
                case TransformKind::shift:
                    sy = oy - dy;
                    sx = ox - dx;
                    if (t.boundary == ShiftBoundary::circular) {
                        sy = wrap(sy, d.h);
                        sx = wrap(sx, d.w);
                    } else {
                        valid = sy >= 0 && sy < d.h && sx >= 0 && sx < d.w;
                    }
                    break;
                case TransformKind::rescale: break;
            }
            const int64_t src = valid ? sy * d.w + sx : -1;
            for (int64_t l = 0; l < d.lead; ++l)
                map[static_cast<size_t>((l * oh + oy) * ow + ox)] = valid ? l * d.h * d.w + src : -1;
        }
    return map;
}

namespace {

Tensor apply_plain(const Tensor& x, const TransformSpec& t, int64_t divisor) {
    if (t.kind == TransformKind::identity) return x;
    if (t.kind == TransformKind::rescale) {
        // Route through the autodiff kernels so both paths resample identically.
        const Dims d = trailing_dims(x.shape());
        const Shape os = transformed_shape(x.shape(), t, divisor);
        ad::Var v = ad::constant(x.reshaped({1, d.lead, d.h, d.w}));
        ad::Var r = t.scale == 0.5 ? ad::avg_pool(v, 2) : ad::upsample_bilinear2(v);
        return r->value.reshaped(os);
    }
    const Shape os = transformed_shape(x.shape(), t, divisor);
    const auto map = build_index_map(x.shape(), t, divisor);
    Tensor out(os);
    for (size_t i = 0; i < map.size(); ++i)
        out[static_cast<int64_t>(i)] = map[i] >= 0 ? x[map[i]] : 0.0;
    return out;
}

}  // namespace

Tensor apply_to_image(const Tensor& img, const TransformSpec& t) { return apply_plain(img, t, 1); }

Tensor apply_to_latent(const Tensor& z, const TransformSpec& t, int64_t d) { return apply_plain(z, t, d); }

ad::Var apply_to_latent_var(const ad::Var& z, const TransformSpec& t, int64_t d) {
    if (z->value.ndim() != 4) throw std::invalid_argument("apply_to_latent_var: expects NCHW");
    if (t.kind == TransformKind::identity) return z;
    if (t.kind == TransformKind::rescale)
        return t.scale == 0.5 ? ad::avg_pool(z, 2) : ad::upsample_bilinear2(z);
    const Shape os = transformed_shape(z->value.shape(), t, d);
    auto map = std::make_shared<std::vector<int64_t>>(build_index_map(z->value.shape(), t, d));
    return ad::gather(z, std::move(map), os);
}

TransformGroup TransformGroup::make(std::vector<TransformSpec> specs, std::vector<double> weights) {
    if (specs.size() != weights.size()) throw std::invalid_argument("transform group: specs/weights size mismatch");
    if (specs.empty()) throw std::invalid_argument("transform group: empty");
    bool has_identity = false;
    double total = 0.0;
    for (size_t i = 0; i < specs.size(); ++i) {
        if (weights[i] < 0.0) throw std::invalid_argument("transform group: negative weight");
        total += weights[i];
        if (specs[i].kind == TransformKind::identity) has_identity = true;
    }
    if (!has_identity) throw std::invalid_argument("transform group: must contain identity");
    if (total <= 0.0) throw std::invalid_argument("transform group: weights sum to zero");
    for (auto& w : weights) w /= total;
    TransformGroup g;
    g.specs = std::move(specs);
    g.weights = std::move(weights);
    return g;
}

TransformGroup TransformGroup::from_entries(const std::vector<std::pair<std::string, double>>& entries) {
    std::vector<TransformSpec> specs;
    std::vector<double> weights;
    for (const auto& [s, w] : entries) {
        specs.push_back(TransformSpec::parse(s));
        weights.push_back(w);
    }
    return make(std::move(specs), std::move(weights));
}

std::vector<std::pair<std::string, double>> TransformGroup::entries() const {
    std::vector<std::pair<std::string, double>> out;
    for (size_t i = 0; i < specs.size(); ++i) out.emplace_back(specs[i].str(), weights[i]);
    return out;
}

TransformGroup TransformGroup::identity_only() { return make({TransformSpec::identity()}, {1.0}); }

TransformGroup TransformGroup::default_group(int64_t d) {
    std::vector<TransformSpec> specs = {TransformSpec::identity(), TransformSpec::flip_h(),
                                        TransformSpec::flip_v(),  TransformSpec::rot90(1),
                                        TransformSpec::rot90(2),  TransformSpec::rot90(3)};
    for (int64_t m : {d, 2 * d, -d, -2 * d}) {
        specs.push_back(TransformSpec::shift(m, 0));
        specs.push_back(TransformSpec::shift(0, m));
    }
    std::vector<double> weights(specs.size(), (1.0 - 0.125) / static_cast<double>(specs.size() - 1));
    weights[0] = 0.125;
    return make(std::move(specs), std::move(weights));
}

void TransformGroup::validate(int64_t h, int64_t w, int64_t d) const {
    for (const auto& t : specs) {
        transformed_shape({h, w}, t, 1);
        if (t.kind == TransformKind::shift) {
            if (t.dy % d || t.dx % d)
                throw std::invalid_argument("transform " + t.str() + " incompatible with latent factor " +
                                            std::to_string(d));
        }
        if (t.kind == TransformKind::rescale && ((h / d) % 2 || (w / d) % 2) && t.scale == 0.5)
            throw std::invalid_argument("rescale:0.5 needs an even latent grid, have " + std::to_string(h / d) +
                                        "x" + std::to_string(w / d));
    }
}

const TransformSpec& TransformGroup::sample(Rng& rng) const { return specs[rng.weighted_index(weights)]; }

}  // namespace reqvae
