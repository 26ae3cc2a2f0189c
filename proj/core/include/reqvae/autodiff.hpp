#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "reqvae/tensor.hpp"

namespace reqvae::ad {

/// Reverse-mode autodiff over Tensor, define-by-run. A Var is a node in the
/// tape; ops build new nodes whose backward closures scatter gradients into
/// their parents. Subgraphs with no differentiable inputs are pruned at
/// construction, so frozen networks evaluate without retaining a tape.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_op;

    /// Zero-initialized gradient buffer, allocated on first use.
    Tensor& ensure_grad();
    void accumulate_grad(const Tensor& g);
};

Var constant(Tensor value);
Var leaf(Tensor value, bool requires_grad = true);
Var detach(const Var& v);

/// Runs the tape from a scalar root. Gradients accumulate into every
/// reachable node with requires_grad; leaves keep theirs until cleared.
void backward(const Var& root);

// ---- elementwise (broadcasting, numpy alignment rules) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var offset(const Var& a, double c);
Var neg(const Var& a);

Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var abs(const Var& a);
Var square(const Var& a);
Var clamp(const Var& a, double lo, double hi);

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var sum_axis(const Var& a, int64_t axis, bool keepdim = true);
Var mean_axis(const Var& a, int64_t axis, bool keepdim = true);

// ---- shape ----
Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, const std::vector<int64_t>& perm);
Var concat(const std::vector<Var>& vs, int64_t axis);
Var slice(const Var& a, int64_t axis, int64_t start, int64_t len);

/// out[i] = a.flat[map[i]] for map[i] >= 0, else 0. Backward scatter-adds.
Var gather(const Var& a, std::shared_ptr<const std::vector<int64_t>> map, Shape out_shape);

/// Row subset of a 2d tensor.
Var gather_rows(const Var& a, std::vector<int64_t> rows);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);
Var transpose2d(const Var& a);

// ---- conv & friends (NCHW) ----
enum class PadMode { zeros, circular };

/// 2d convolution, odd square kernel, same-style padding k/2.
/// x: [B,Cin,H,W], w: [Cout,Cin,k,k], bias: [Cout] or null Var.
Var conv2d(const Var& x, const Var& w, const Var& bias, int64_t stride, PadMode pad);

Var upsample_nearest2(const Var& x);
/// Factor-2 bilinear upsample, half-pixel centers, edges clamped.
Var upsample_bilinear2(const Var& x);
/// k x k average pooling with stride k; spatial dims must divide k.
Var avg_pool(const Var& x, int64_t k);

/// Group normalization with affine parameters gamma/beta of shape [C].
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int64_t groups, double eps = 1e-6);

// ---- composite conveniences ----
Var mse_loss(const Var& a, const Var& b);
Var l1_loss(const Var& a, const Var& b);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace reqvae::ad
