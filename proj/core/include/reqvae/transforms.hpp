#pragma once

#include <string>
#include <utility>
#include <vector>

#include "reqvae/autodiff.hpp"
#include "reqvae/rng.hpp"
#include "reqvae/tensor.hpp"

namespace reqvae {

enum class TransformKind { identity, flip_h, flip_v, rot90, shift, rescale };
enum class ShiftBoundary { circular, crop };

/// One spatial transform acting on the trailing two (H, W) axes.
/// Rotation is counterclockwise in quarter turns; a positive shift moves
/// content down/right; rescale factors are restricted to {0.5, 2.0}.
struct TransformSpec {
    TransformKind kind = TransformKind::identity;
    int k = 0;
    int64_t dy = 0, dx = 0;
    ShiftBoundary boundary = ShiftBoundary::circular;
    double scale = 1.0;

    static TransformSpec identity() { return {}; }
    static TransformSpec flip_h() { return {TransformKind::flip_h}; }
    static TransformSpec flip_v() { return {TransformKind::flip_v}; }
    static TransformSpec rot90(int k);
    static TransformSpec shift(int64_t dy, int64_t dx, ShiftBoundary b = ShiftBoundary::circular);
    static TransformSpec rescale(double s);

    /// Pixel-exact permutations: everything except rescale and crop shifts.
    bool exact() const;

    /// Canonical text form, e.g. "rot90:1", "shift:16,-32:circular".
    std::string str() const;
    static TransformSpec parse(const std::string& s);

    bool operator==(const TransformSpec&) const = default;
};

/// Exact inverse; rescale has none under exact arithmetic.
TransformSpec invert(const TransformSpec& t);

/// Output shape of applying t; offsets are divided by `divisor` (1 for
/// images, the downsampling factor for latents). Rejects incompatible
/// dims (odd rescale, rot90 on non-square, indivisible shift).
Shape transformed_shape(const Shape& in, const TransformSpec& t, int64_t divisor);

/// Flat gather map for an exact transform over the trailing two axes:
/// out.flat[i] = in.flat[map[i]], with -1 marking crop-shift fill.
std::vector<int64_t> build_index_map(const Shape& in, const TransformSpec& t, int64_t divisor);

/// Applies t over the trailing two axes of a tensor with any leading dims.
Tensor apply_to_image(const Tensor& img, const TransformSpec& t);

/// Same action with shift offsets divided by the downsampling factor d.
Tensor apply_to_latent(const Tensor& z, const TransformSpec& t, int64_t d);

/// Differentiable latent action on an NCHW Var. Uses the identical index
/// maps / resampling kernels as the plain-tensor path.
ad::Var apply_to_latent_var(const ad::Var& z, const TransformSpec& t, int64_t d);

struct TransformGroup {
    std::vector<TransformSpec> specs;
    std::vector<double> weights;

    /// Normalizes weights; requires identity membership and nonnegative
    /// weights with a positive sum.
    static TransformGroup make(std::vector<TransformSpec> specs, std::vector<double> weights);
    static TransformGroup from_entries(const std::vector<std::pair<std::string, double>>& entries);
    std::vector<std::pair<std::string, double>> entries() const;

    static TransformGroup identity_only();
    /// identity (weight 0.125), flips, rot90 k 1..3, circular shifts by
    /// +-d and +-2d along each axis, uniform over the non-identity rest.
    static TransformGroup default_group(int64_t d);

    /// Checks every member against image dims (H, W) and factor d.
    void validate(int64_t h, int64_t w, int64_t d) const;

    const TransformSpec& sample(Rng& rng) const;
    size_t size() const { return specs.size(); }
};

}  // namespace reqvae
