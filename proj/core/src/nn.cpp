#include "reqvae/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace reqvae::nn {

ad::Var ParamStore::create(const std::string& name, Tensor init, bool requires_grad) {
    if (params_.count(name)) throw std::invalid_argument("parameter already registered: " + name);
    ad::Var v = ad::leaf(std::move(init), requires_grad);
    params_.emplace(name, v);
    return v;
}

ad::Var ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
    return it->second;
}

void ParamStore::zero_grad() {
    for (auto& [name, v] : params_) {
        v->grad_ready = false;
        v->grad = Tensor();
    }
}

void ParamStore::set_requires_grad(bool on) {
    for (auto& [name, v] : params_) v->requires_grad = on;
}

int64_t ParamStore::numel() const {
    int64_t n = 0;
    for (const auto& [name, v] : params_) n += v->value.numel();
    return n;
}

std::map<std::string, Tensor> ParamStore::state() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, v] : params_) out.emplace(name, v->value);
    return out;
}

void ParamStore::load_state(const std::map<std::string, Tensor>& state) {
    for (const auto& [name, t] : state) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::runtime_error("state has unknown parameter: " + name);
        if (!it->second->value.same_shape(t))
            throw std::runtime_error("shape mismatch for " + name + ": have " +
                                     shape_str(it->second->value.shape()) + ", stored " + shape_str(t.shape()));
        it->second->value = t;
    }
    if (state.size() != params_.size()) throw std::runtime_error("state is missing parameters");
}

void Adam::step(ParamStore& params) {
    double norm_sq = 0.0;
    for (const auto& [name, v] : params.all()) {
        if (!v->requires_grad || !v->grad_ready) continue;
        for (int64_t i = 0; i < v->grad.numel(); ++i) norm_sq += v->grad[i] * v->grad[i];
    }
    last_norm_ = std::sqrt(norm_sq);
    const double gscale = (cfg_.clip_norm > 0.0 && last_norm_ > cfg_.clip_norm) ? cfg_.clip_norm / last_norm_ : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, v] : params.all()) {
        if (!v->requires_grad) continue;
        auto mit = m_.find(name);
        if (mit == m_.end()) {
            mit = m_.emplace(name, Tensor::zeros(v->value.shape())).first;
            v_.emplace(name, Tensor::zeros(v->value.shape()));
        }
        Tensor& m = mit->second;
        Tensor& vv = v_.at(name);
        Tensor& p = v->value;
        const bool has_grad = v->grad_ready;
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double g = has_grad ? v->grad[i] * gscale : 0.0;
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            vv[i] = cfg_.beta2 * vv[i] + (1.0 - cfg_.beta2) * g * g;
            p[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(vv[i] / bc2) + cfg_.eps);
        }
    }
}

void Adam::serialize(std::map<std::string, Tensor>& out, const std::string& prefix) const {
    for (const auto& [name, t] : m_) out.emplace(prefix + "m." + name, t);
    for (const auto& [name, t] : v_) out.emplace(prefix + "v." + name, t);
    out.emplace(prefix + "t", Tensor::scalar(static_cast<double>(t_)));
}

void Adam::deserialize(const std::map<std::string, Tensor>& in, const std::string& prefix) {
    m_.clear();
    v_.clear();
    t_ = 0;
    const std::string mp = prefix + "m.", vp = prefix + "v.", tp = prefix + "t";
    for (const auto& [name, t] : in) {
        if (name.rfind(mp, 0) == 0)
            m_.emplace(name.substr(mp.size()), t);
        else if (name.rfind(vp, 0) == 0)
            v_.emplace(name.substr(vp.size()), t);
        else if (name == tp)
            t_ = static_cast<int64_t>(t[0]);
    }
}

int64_t norm_groups(int64_t c) {
    for (int64_t g = std::min<int64_t>(8, c); g > 1; --g)
        if (c % g == 0) return g;
    return 1;
}

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout, int64_t k, int64_t stride,
               ad::PadMode pad, Rng& rng)
    : stride(stride), pad(pad) {
    const double std = std::sqrt(2.0 / static_cast<double>(cin * k * k));
    w = ps.create(name + ".w", Tensor::randn({cout, cin, k, k}, rng, std));
    b = ps.create(name + ".b", Tensor::zeros({cout}));
}

Linear::Linear(ParamStore& ps, const std::string& name, int64_t in, int64_t out, Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(in));
    w = ps.create(name + ".w", Tensor::randn({in, out}, rng, std));
    b = ps.create(name + ".b", Tensor::zeros({1, out}));
}

GroupNorm::GroupNorm(ParamStore& ps, const std::string& name, int64_t channels) : groups(norm_groups(channels)) {
    gamma = ps.create(name + ".g", Tensor::full({channels}, 1.0));
    beta = ps.create(name + ".b", Tensor::zeros({channels}));
}

ResBlock::ResBlock(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout, ad::PadMode pad, Rng& rng)
    : project(cin != cout) {
    n1 = GroupNorm(ps, name + ".n1", cin);
    c1 = Conv2d(ps, name + ".c1", cin, cout, 3, 1, pad, rng);
    n2 = GroupNorm(ps, name + ".n2", cout);
    c2 = Conv2d(ps, name + ".c2", cout, cout, 3, 1, pad, rng);
    if (project) skip = Conv2d(ps, name + ".skip", cin, cout, 1, 1, pad, rng);
}

ad::Var ResBlock::operator()(const ad::Var& x) const {
    ad::Var h = c1(ad::silu(n1(x)));
    h = c2(ad::silu(n2(h)));
    return ad::add(h, project ? skip(x) : x);
}

}  // namespace reqvae::nn
