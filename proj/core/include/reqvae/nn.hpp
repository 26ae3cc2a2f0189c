#pragma once

#include <map>
#include <string>

#include "reqvae/autodiff.hpp"
#include "reqvae/rng.hpp"

namespace reqvae::nn {

/// Named parameter registry. std::map keeps iteration name-sorted, which
/// pins the arithmetic order of the optimizer and the checkpoint layout.
class ParamStore {
public:
    ad::Var create(const std::string& name, Tensor init, bool requires_grad = true);
    ad::Var get(const std::string& name) const;
    bool has(const std::string& name) const { return params_.count(name) > 0; }
    const std::map<std::string, ad::Var>& all() const { return params_; }

    void zero_grad();
    void set_requires_grad(bool on);
    int64_t numel() const;

    std::map<std::string, Tensor> state() const;
    /// Strict: every stored name must exist here with a matching shape.
    void load_state(const std::map<std::string, Tensor>& state);

private:
    std::map<std::string, ad::Var> params_;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // global-norm clip; <= 0 disables
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    /// Applies one update from the gradients currently on the store's
    /// trainable parameters. Does not zero gradients.
    void step(ParamStore& params);

    double last_grad_norm() const { return last_norm_; }
    int64_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }

    /// Moment buffers and step counter under "<prefix>m.<name>",
    /// "<prefix>v.<name>", "<prefix>t" for checkpointing.
    void serialize(std::map<std::string, Tensor>& out, const std::string& prefix) const;
    void deserialize(const std::map<std::string, Tensor>& in, const std::string& prefix);

private:
    AdamConfig cfg_;
    std::map<std::string, Tensor> m_, v_;
    int64_t t_ = 0;
    double last_norm_ = 0.0;
};

/// Largest divisor of c that is <= 8; keeps group norm valid at any width.
int64_t norm_groups(int64_t c);

struct Conv2d {
    ad::Var w, b;
    int64_t stride = 1;
    ad::PadMode pad = ad::PadMode::zeros;

    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout, int64_t k, int64_t stride,
           ad::PadMode pad, Rng& rng);
    ad::Var operator()(const ad::Var& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

struct Linear {
    ad::Var w, b;  // w: [in, out]

    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int64_t in, int64_t out, Rng& rng);
    /// x: [N, in] -> [N, out]
    ad::Var operator()(const ad::Var& x) const { return ad::add(ad::matmul(x, w), b); }
};

struct GroupNorm {
    ad::Var gamma, beta;
    int64_t groups = 1;

    GroupNorm() = default;
    GroupNorm(ParamStore& ps, const std::string& name, int64_t channels);
    ad::Var operator()(const ad::Var& x) const { return ad::group_norm(x, gamma, beta, groups); }
};

/// norm -> silu -> conv3x3, twice, plus a (projected) skip.
struct ResBlock {
    GroupNorm n1, n2;
    Conv2d c1, c2, skip;
    bool project = false;

    ResBlock() = default;
    ResBlock(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout, ad::PadMode pad, Rng& rng);
    ad::Var operator()(const ad::Var& x) const;
};

}  // namespace reqvae::nn
