#include "reqvae/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

namespace reqvae::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using MapCRM = Eigen::Map<const RowMat>;

Tensor& Node::ensure_grad() {
    if (!grad_ready) {
        grad = Tensor::zeros(value.shape());
        grad_ready = true;
    }
    return grad;
}

void Node::accumulate_grad(const Tensor& g) { ensure_grad().add_(g); }

Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = false;
    return n;
}

Var leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

Var detach(const Var& v) { return constant(v->value); }

namespace {

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_op = std::move(bw);
    }
    return n;
}

// ---------- broadcasting ----------

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (size_t i = 0; i < nd; ++i) {
        const int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("broadcast mismatch " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<int64_t> strides(out.size(), 0);
    int64_t s = 1;
    const size_t off = out.size() - in.size();
    for (size_t i = in.size(); i-- > 0;) {
        strides[i + off] = (in[i] == 1 && out[i + off] != 1) ? 0 : s;
        s *= in[i];
    }
    return strides;
}

template <class F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, F f) {
    if (a.same_shape(b)) {
        Tensor out(a.shape());
        const int64_t n = a.numel();
        for (int64_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
        return out;
    }
    if (b.numel() == 1) {
        Tensor out(a.shape());
        const double bv = b[0];
        for (int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], bv);
        return out;
    }
    if (a.numel() == 1) {
        Tensor out(b.shape());
        const double av = a[0];
        for (int64_t i = 0; i < b.numel(); ++i) out[i] = f(av, b[i]);
        return out;
    }
    const Shape os = broadcast_shape(a.shape(), b.shape());
    Tensor out(os);
    const auto sa = broadcast_strides(a.shape(), os);
    const auto sb = broadcast_strides(b.shape(), os);
    const size_t nd = os.size();
    std::vector<int64_t> idx(nd, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] = f(a[ia], b[ib]);
        for (size_t d = nd; d-- > 0;) {
            idx[d]++;
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < os[d]) break;
            idx[d] = 0;
            ia -= sa[d] * os[d];
            ib -= sb[d] * os[d];
        }
    }
    return out;
}

/// Sum g down to `target` shape (inverse of broadcasting).
Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
    if (g.shape() == target) return g;
    Tensor out(target);
    const auto st = broadcast_strides(target, g.shape());
    const size_t nd = g.shape().size();
    std::vector<int64_t> idx(nd, 0);
    int64_t it = 0;
    const Shape& gs = g.shape();
    for (int64_t i = 0; i < g.numel(); ++i) {
        out[it] += g[i];
        for (size_t d = nd; d-- > 0;) {
            idx[d]++;
            it += st[d];
            if (idx[d] < gs[d]) break;
            idx[d] = 0;
            it -= st[d] * gs[d];
        }
    }
    return out;
}

Var binary_op(const Var& a, const Var& b, double (*fwd)(double, double), double (*dfa)(double, double),
              double (*dfb)(double, double)) {
    Tensor value = broadcast_apply(a->value, b->value, fwd);
    return make_node(std::move(value), {a, b}, [a, b, dfa, dfb](Node& self) {
        if (a->requires_grad) {
            Tensor ga = broadcast_apply(a->value, b->value, dfa);
            Tensor full = broadcast_apply(self.grad, ga, [](double x, double y) { return x * y; });
            a->accumulate_grad(reduce_to_shape(full, a->value.shape()));
        }
        if (b->requires_grad) {
            Tensor gb = broadcast_apply(a->value, b->value, dfb);
            Tensor full = broadcast_apply(self.grad, gb, [](double x, double y) { return x * y; });
            b->accumulate_grad(reduce_to_shape(full, b->value.shape()));
        }
    });
}

template <class Fwd, class Bwd>
Var unary_op(const Var& a, Fwd fwd, Bwd dval) {
    Tensor value(a->value.shape());
    for (int64_t i = 0; i < value.numel(); ++i) value[i] = fwd(a->value[i]);
    return make_node(std::move(value), {a}, [a, dval](Node& self) {
        Tensor& ga = a->ensure_grad();
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i] * dval(a->value[i], self.value[i]);
    });
}

}  // namespace

void backward(const Var& root) {
    if (root->value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!root->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_op && n->grad_ready) n->backward_op(*n);
    }
}

// ---------- elementwise ----------

Var add(const Var& a, const Var& b) {
    return binary_op(
        a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
    return binary_op(
        a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
    return binary_op(
        a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Var div(const Var& a, const Var& b) {
    return binary_op(
        a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Var scale(const Var& a, double s) {
    Tensor value = a->value;
    value.mul_(s);
    return make_node(std::move(value), {a}, [a, s](Node& self) {
        Tensor& ga = a->ensure_grad();
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i] * s;
    });
}

Var offset(const Var& a, double c) {
    return unary_op(
        a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var exp(const Var& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(const Var& a) {
    return unary_op(
        a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var tanh(const Var& a) {
    return unary_op(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
    return unary_op(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Var silu(const Var& a) {
    return unary_op(
        a, [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x, double) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Var relu(const Var& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, double slope) {
    return unary_op(
        a, [slope](double x) { return x > 0.0 ? x : slope * x; },
        [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var abs(const Var& a) {
    return unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
    return unary_op(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(const Var& a, double lo, double hi) {
    return unary_op(
        a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------- reductions ----------

Var sum_all(const Var& a) {
    Tensor value = Tensor::scalar(a->value.sum());
    return make_node(std::move(value), {a}, [a](Node& self) {
        Tensor& ga = a->ensure_grad();
        const double g = self.grad[0];
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel())); }

Var sum_axis(const Var& a, int64_t axis, bool keepdim) {
    const Shape& s = a->value.shape();
    if (axis < 0) axis += static_cast<int64_t>(s.size());
    if (axis < 0 || axis >= static_cast<int64_t>(s.size())) throw std::out_of_range("sum_axis: bad axis");
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const int64_t n = s[axis];

    Shape os;
    for (int64_t i = 0; i < static_cast<int64_t>(s.size()); ++i) {
        if (i == axis) {
            if (keepdim) os.push_back(1);
        } else {
            os.push_back(s[i]);
        }
    }
    if (os.empty()) os.push_back(1);
    Tensor value(os);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < n; ++k) {
            const double* src = a->value.data() + (o * n + k) * inner;
            double* dst = value.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    return make_node(std::move(value), {a}, [a, outer, n, inner](Node& self) {
        Tensor& ga = a->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t k = 0; k < n; ++k) {
                double* dst = ga.data() + (o * n + k) * inner;
                const double* src = self.grad.data() + o * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
}

Var mean_axis(const Var& a, int64_t axis, bool keepdim) {
    int64_t ax = axis < 0 ? axis + a->value.ndim() : axis;
    return scale(sum_axis(a, axis, keepdim), 1.0 / static_cast<double>(a->value.size(ax)));
}

// ---------- shape ----------

Var reshape(const Var& a, Shape shape) {
    Tensor value = a->value.reshaped(shape);
    return make_node(std::move(value), {a}, [a](Node& self) {
        a->accumulate_grad(self.grad.reshaped(a->value.shape()));
    });
}

namespace {

Tensor permute_tensor(const Tensor& t, const std::vector<int64_t>& perm) {
    const Shape& s = t.shape();
    const size_t nd = s.size();
    if (perm.size() != nd) throw std::invalid_argument("permute: rank mismatch");
    Shape os(nd);
    for (size_t i = 0; i < nd; ++i) os[i] = s[perm[i]];
    Tensor out(os);
    std::vector<int64_t> in_strides(nd, 1);
    for (size_t i = nd - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * s[i + 1];
    std::vector<int64_t> out_src_stride(nd);
    for (size_t i = 0; i < nd; ++i) out_src_stride[i] = in_strides[perm[i]];
    std::vector<int64_t> idx(nd, 0);
    int64_t src = 0;
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] = t[src];
        for (size_t d = nd; d-- > 0;) {
            idx[d]++;
            src += out_src_stride[d];
            if (idx[d] < os[d]) break;
            idx[d] = 0;
            src -= out_src_stride[d] * os[d];
        }
    }
    return out;
}

}  // namespace

Var permute(const Var& a, const std::vector<int64_t>& perm) {
    Tensor value = permute_tensor(a->value, perm);
    std::vector<int64_t> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int64_t>(i);
    return make_node(std::move(value), {a}, [a, inv](Node& self) {
        a->accumulate_grad(permute_tensor(self.grad, inv));
    });
}

Var concat(const std::vector<Var>& vs, int64_t axis) {
    if (vs.empty()) throw std::invalid_argument("concat: empty input");
    const Shape& s0 = vs[0]->value.shape();
    if (axis < 0) axis += static_cast<int64_t>(s0.size());
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s0[i];
    for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    int64_t total_axis = 0;
    for (const auto& v : vs) {
        const Shape& s = v->value.shape();
        if (s.size() != s0.size()) throw std::invalid_argument("concat: rank mismatch");
        for (size_t i = 0; i < s.size(); ++i)
            if (static_cast<int64_t>(i) != axis && s[i] != s0[i])
                throw std::invalid_argument("concat: shape mismatch off axis");
        total_axis += s[axis];
    }
    Shape os = s0;
    os[axis] = total_axis;
    Tensor value(os);
    int64_t off = 0;
    for (const auto& v : vs) {
        const int64_t na = v->value.size(axis);
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(value.data() + (o * total_axis + off) * inner, v->value.data() + o * na * inner,
                        static_cast<size_t>(na * inner) * sizeof(double));
        off += na;
    }
    return make_node(std::move(value), vs, [vs, outer, inner, total_axis, axis](Node& self) {
        int64_t off2 = 0;
        for (const auto& v : vs) {
            const int64_t na = v->value.size(axis);
            if (v->requires_grad) {
                Tensor& gv = v->ensure_grad();
                for (int64_t o = 0; o < outer; ++o) {
                    const double* src = self.grad.data() + (o * total_axis + off2) * inner;
                    double* dst = gv.data() + o * na * inner;
                    for (int64_t i = 0; i < na * inner; ++i) dst[i] += src[i];
                }
            }
            off2 += na;
        }
    });
}

Var slice(const Var& a, int64_t axis, int64_t start, int64_t len) {
    const Shape& s = a->value.shape();
    if (axis < 0) axis += static_cast<int64_t>(s.size());
    if (start < 0 || len < 0 || start + len > s[axis]) throw std::out_of_range("slice: bounds");
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const int64_t na = s[axis];
    Shape os = s;
    os[axis] = len;
    Tensor value(os);
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(value.data() + o * len * inner, a->value.data() + (o * na + start) * inner,
                    static_cast<size_t>(len * inner) * sizeof(double));
    return make_node(std::move(value), {a}, [a, outer, inner, na, start, len](Node& self) {
        Tensor& ga = a->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
            const double* src = self.grad.data() + o * len * inner;
            double* dst = ga.data() + (o * na + start) * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
    });
}

Var gather(const Var& a, std::shared_ptr<const std::vector<int64_t>> map, Shape out_shape) {
    if (static_cast<int64_t>(map->size()) != shape_numel(out_shape))
        throw std::invalid_argument("gather: map size does not match output shape");
    Tensor value(out_shape);
    const auto& m = *map;
    for (size_t i = 0; i < m.size(); ++i) value[static_cast<int64_t>(i)] = m[i] >= 0 ? a->value[m[i]] : 0.0;
    return make_node(std::move(value), {a}, [a, map](Node& self) {
        Tensor& ga = a->ensure_grad();
        const auto& mm = *map;
        for (size_t i = 0; i < mm.size(); ++i)
            if (mm[i] >= 0) ga[mm[i]] += self.grad[static_cast<int64_t>(i)];
    });
}

Var gather_rows(const Var& a, std::vector<int64_t> rows) {
    if (a->value.ndim() != 2) throw std::invalid_argument("gather_rows: expects 2d tensor");
    const int64_t cols = a->value.size(1);
    Tensor value({static_cast<int64_t>(rows.size()), cols});
    for (size_t r = 0; r < rows.size(); ++r)
        std::memcpy(value.data() + static_cast<int64_t>(r) * cols, a->value.data() + rows[r] * cols,
                    static_cast<size_t>(cols) * sizeof(double));
    return make_node(std::move(value), {a}, [a, rows = std::move(rows), cols](Node& self) {
        Tensor& ga = a->ensure_grad();
        for (size_t r = 0; r < rows.size(); ++r) {
            const double* src = self.grad.data() + static_cast<int64_t>(r) * cols;
            double* dst = ga.data() + rows[r] * cols;
            for (int64_t i = 0; i < cols; ++i) dst[i] += src[i];
        }
    });
}

// ---------- linear algebra ----------

Var matmul(const Var& a, const Var& b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2) throw std::invalid_argument("matmul: expects 2d tensors");
    const int64_t m = a->value.size(0), k = a->value.size(1), n = b->value.size(1);
    if (b->value.size(0) != k)
        throw std::invalid_argument("matmul: inner dims " + shape_str(a->value.shape()) + " x " +
                                    shape_str(b->value.shape()));
    Tensor value({m, n});
    MapCRM A(a->value.data(), m, k), B(b->value.data(), k, n);
    MapRM C(value.data(), m, n);
    C.noalias() = A * B;
    return make_node(std::move(value), {a, b}, [a, b, m, k, n](Node& self) {
        MapCRM G(self.grad.data(), m, n);
        if (a->requires_grad) {
            MapCRM B(b->value.data(), k, n);
            MapRM GA(a->ensure_grad().data(), m, k);
            GA.noalias() += G * B.transpose();
        }
        if (b->requires_grad) {
            MapCRM A(a->value.data(), m, k);
            MapRM GB(b->ensure_grad().data(), k, n);
            GB.noalias() += A.transpose() * G;
        }
    });
}

Var transpose2d(const Var& a) { return permute(a, {1, 0}); }

// ---------- conv ----------

namespace {

struct ConvDims {
    int64_t B, Cin, H, W, Cout, k, stride, pad, OH, OW, K, P;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int64_t stride) {
    if (x.ndim() != 4 || w.ndim() != 4) throw std::invalid_argument("conv2d: x and w must be 4d");
    ConvDims d;
    d.B = x.size(0);
    d.Cin = x.size(1);
    d.H = x.size(2);
    d.W = x.size(3);
    d.Cout = w.size(0);
    d.k = w.size(2);
    if (w.size(1) != d.Cin)
        throw std::invalid_argument("conv2d: weight Cin " + std::to_string(w.size(1)) + " != input Cin " +
                                    std::to_string(d.Cin));
    if (w.size(3) != d.k || d.k % 2 == 0) throw std::invalid_argument("conv2d: kernel must be square and odd");
    d.stride = stride;
    d.pad = d.k / 2;
    d.OH = (d.H + 2 * d.pad - d.k) / stride + 1;
    d.OW = (d.W + 2 * d.pad - d.k) / stride + 1;
    d.K = d.Cin * d.k * d.k;
    d.P = d.OH * d.OW;
    return d;
}

inline int64_t wrap(int64_t i, int64_t n) {
    i %= n;
    return i < 0 ? i + n : i;
}

void im2col(const double* x, const ConvDims& d, PadMode pad, double* cols) {
    for (int64_t ci = 0; ci < d.Cin; ++ci) {
        const double* plane = x + ci * d.H * d.W;
        for (int64_t ky = 0; ky < d.k; ++ky)
            for (int64_t kx = 0; kx < d.k; ++kx) {
                double* row = cols + ((ci * d.k + ky) * d.k + kx) * d.P;
                for (int64_t oy = 0; oy < d.OH; ++oy) {
                    int64_t y = oy * d.stride - d.pad + ky;
                    const bool y_out = y < 0 || y >= d.H;
                    if (y_out) {
                        if (pad == PadMode::zeros) {
                            std::memset(row + oy * d.OW, 0, static_cast<size_t>(d.OW) * sizeof(double));
                            continue;
                        }
                        y = wrap(y, d.H);
                    }
                    const double* src = plane + y * d.W;
                    double* dst = row + oy * d.OW;
                    for (int64_t ox = 0; ox < d.OW; ++ox) {
                        int64_t xx = ox * d.stride - d.pad + kx;
                        if (xx < 0 || xx >= d.W) {
                            if (pad == PadMode::zeros) {
                                dst[ox] = 0.0;
                                continue;
                            }
                            xx = wrap(xx, d.W);
                        }
                        dst[ox] = src[xx];
                    }
                }
            }
    }
}

void col2im_add(const double* cols, const ConvDims& d, PadMode pad, double* dx) {
    for (int64_t ci = 0; ci < d.Cin; ++ci) {
        double* plane = dx + ci * d.H * d.W;
        for (int64_t ky = 0; ky < d.k; ++ky)
            for (int64_t kx = 0; kx < d.k; ++kx) {
                const double* row = cols + ((ci * d.k + ky) * d.k + kx) * d.P;
                for (int64_t oy = 0; oy < d.OH; ++oy) {
                    int64_t y = oy * d.stride - d.pad + ky;
                    if (y < 0 || y >= d.H) {
                        if (pad == PadMode::zeros) continue;
                        y = wrap(y, d.H);
                    }
                    double* dst = plane + y * d.W;
                    const double* src = row + oy * d.OW;
                    for (int64_t ox = 0; ox < d.OW; ++ox) {
                        int64_t xx = ox * d.stride - d.pad + kx;
                        if (xx < 0 || xx >= d.W) {
                            if (pad == PadMode::zeros) continue;
                            xx = wrap(xx, d.W);
                        }
                        dst[xx] += src[ox];
                    }
                }
            }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, int64_t stride, PadMode pad) {
    const ConvDims d = conv_dims(x->value, w->value, stride);
    if (bias && bias->value.numel() != d.Cout) throw std::invalid_argument("conv2d: bias size != Cout");

    Tensor value({d.B, d.Cout, d.OH, d.OW});
    std::vector<double> cols(static_cast<size_t>(d.K * d.P));
    MapCRM Wm(w->value.data(), d.Cout, d.K);
    for (int64_t b = 0; b < d.B; ++b) {
        im2col(x->value.data() + b * d.Cin * d.H * d.W, d, pad, cols.data());
        MapCRM Cm(cols.data(), d.K, d.P);
        MapRM Ym(value.data() + b * d.Cout * d.P, d.Cout, d.P);
        Ym.noalias() = Wm * Cm;
        if (bias) {
            double* out = value.data() + b * d.Cout * d.P;
            for (int64_t c = 0; c < d.Cout; ++c) {
                const double bv = bias->value[c];
                for (int64_t p = 0; p < d.P; ++p) out[c * d.P + p] += bv;
            }
        }
    }

    std::vector<Var> parents = bias ? std::vector<Var>{x, w, bias} : std::vector<Var>{x, w};
    return make_node(std::move(value), std::move(parents), [x, w, bias, d, pad](Node& self) {
        std::vector<double> cols(static_cast<size_t>(d.K * d.P));
        std::vector<double> dcols(static_cast<size_t>(d.K * d.P));
        const bool need_dx = x->requires_grad;
        const bool need_dw = w->requires_grad;
        const bool need_db = bias && bias->requires_grad;
        MapCRM Wm(w->value.data(), d.Cout, d.K);
        for (int64_t b = 0; b < d.B; ++b) {
            MapCRM Gm(self.grad.data() + b * d.Cout * d.P, d.Cout, d.P);
            if (need_dw) {
                im2col(x->value.data() + b * d.Cin * d.H * d.W, d, pad, cols.data());
                MapCRM Cm(cols.data(), d.K, d.P);
                MapRM dWm(w->ensure_grad().data(), d.Cout, d.K);
                dWm.noalias() += Gm * Cm.transpose();
            }
            if (need_db) {
                Tensor& gb = bias->ensure_grad();
                const double* g = self.grad.data() + b * d.Cout * d.P;
                for (int64_t c = 0; c < d.Cout; ++c) {
                    double s = 0.0;
                    for (int64_t p = 0; p < d.P; ++p) s += g[c * d.P + p];
                    gb[c] += s;
                }
            }
            if (need_dx) {
                MapRM dCm(dcols.data(), d.K, d.P);
                dCm.noalias() = Wm.transpose() * Gm;
                col2im_add(dcols.data(), d, pad, x->ensure_grad().data() + b * d.Cin * d.H * d.W);
            }
        }
    });
}

// ---------- resampling ----------

Var upsample_nearest2(const Var& x) {
    const Shape& s = x->value.shape();
    if (s.size() != 4) throw std::invalid_argument("upsample_nearest2: expects NCHW");
    const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    Tensor value({B, C, H * 2, W * 2});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* src = x->value.data() + bc * H * W;
        double* dst = value.data() + bc * 4 * H * W;
        for (int64_t y = 0; y < 2 * H; ++y)
            for (int64_t xx = 0; xx < 2 * W; ++xx) dst[y * 2 * W + xx] = src[(y / 2) * W + (xx / 2)];
    }
    return make_node(std::move(value), {x}, [x, B, C, H, W](Node& self) {
        Tensor& gx = x->ensure_grad();
        for (int64_t bc = 0; bc < B * C; ++bc) {
            const double* g = self.grad.data() + bc * 4 * H * W;
            double* dst = gx.data() + bc * H * W;
            for (int64_t y = 0; y < 2 * H; ++y)
                for (int64_t xx = 0; xx < 2 * W; ++xx) dst[(y / 2) * W + (xx / 2)] += g[y * 2 * W + xx];
        }
    });
}

namespace {

/// Half-pixel source coordinates and weights for factor-2 bilinear.
void bilinear2_axis(int64_t n, std::vector<int64_t>& i0, std::vector<int64_t>& i1, std::vector<double>& w1) {
    i0.resize(2 * n);
    i1.resize(2 * n);
    w1.resize(2 * n);
    for (int64_t o = 0; o < 2 * n; ++o) {
        double f = (o + 0.5) / 2.0 - 0.5;
        f = std::max(0.0, std::min(f, static_cast<double>(n - 1)));
        const int64_t lo = static_cast<int64_t>(f);
        i0[o] = lo;
        i1[o] = std::min(lo + 1, n - 1);
        w1[o] = f - lo;
    }
}

}  // namespace

Var upsample_bilinear2(const Var& x) {
    const Shape& s = x->value.shape();
    if (s.size() != 4) throw std::invalid_argument("upsample_bilinear2: expects NCHW");
    const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    std::vector<int64_t> y0, y1, x0, x1;
    std::vector<double> wy, wx;
    bilinear2_axis(H, y0, y1, wy);
    bilinear2_axis(W, x0, x1, wx);
    Tensor value({B, C, 2 * H, 2 * W});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* src = x->value.data() + bc * H * W;
        double* dst = value.data() + bc * 4 * H * W;
        for (int64_t oy = 0; oy < 2 * H; ++oy)
            for (int64_t ox = 0; ox < 2 * W; ++ox)
                dst[oy * 2 * W + ox] = (1 - wy[oy]) * ((1 - wx[ox]) * src[y0[oy] * W + x0[ox]] +
                                                       wx[ox] * src[y0[oy] * W + x1[ox]]) +
                                       wy[oy] * ((1 - wx[ox]) * src[y1[oy] * W + x0[ox]] +
                                                 wx[ox] * src[y1[oy] * W + x1[ox]]);
    }
    return make_node(std::move(value), {x},
                     [x, B, C, H, W, y0, y1, x0, x1, wy, wx](Node& self) {
                         Tensor& gx = x->ensure_grad();
                         for (int64_t bc = 0; bc < B * C; ++bc) {
                             const double* g = self.grad.data() + bc * 4 * H * W;
                             double* dst = gx.data() + bc * H * W;
                             for (int64_t oy = 0; oy < 2 * H; ++oy)
                                 for (int64_t ox = 0; ox < 2 * W; ++ox) {
                                     const double gv = g[oy * 2 * W + ox];
                                     dst[y0[oy] * W + x0[ox]] += (1 - wy[oy]) * (1 - wx[ox]) * gv;
                                     dst[y0[oy] * W + x1[ox]] += (1 - wy[oy]) * wx[ox] * gv;
                                     dst[y1[oy] * W + x0[ox]] += wy[oy] * (1 - wx[ox]) * gv;
                                     dst[y1[oy] * W + x1[ox]] += wy[oy] * wx[ox] * gv;
                                 }
                         }
                     });
}

Var avg_pool(const Var& x, int64_t k) {
    const Shape& s = x->value.shape();
    if (s.size() != 4) throw std::invalid_argument("avg_pool: expects NCHW");
    const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    if (H % k || W % k)
        throw std::invalid_argument("avg_pool: spatial dims " + shape_str(s) + " not divisible by " +
                                    std::to_string(k));
    const int64_t OH = H / k, OW = W / k;
    const double inv = 1.0 / static_cast<double>(k * k);
    Tensor value({B, C, OH, OW});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* src = x->value.data() + bc * H * W;
        double* dst = value.data() + bc * OH * OW;
        for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
                double acc = 0.0;
                for (int64_t dy = 0; dy < k; ++dy)
                    for (int64_t dx = 0; dx < k; ++dx) acc += src[(oy * k + dy) * W + ox * k + dx];
                dst[oy * OW + ox] = acc * inv;
            }
    }
    return make_node(std::move(value), {x}, [x, B, C, H, W, OH, OW, k, inv](Node& self) {
        Tensor& gx = x->ensure_grad();
        for (int64_t bc = 0; bc < B * C; ++bc) {
            const double* g = self.grad.data() + bc * OH * OW;
            double* dst = gx.data() + bc * H * W;
            for (int64_t oy = 0; oy < OH; ++oy)
                for (int64_t ox = 0; ox < OW; ++ox) {
                    const double gv = g[oy * OW + ox] * inv;
                    for (int64_t dy = 0; dy < k; ++dy)
                        for (int64_t dx = 0; dx < k; ++dx) dst[(oy * k + dy) * W + ox * k + dx] += gv;
                }
        }
    });
}

// ---------- normalization ----------

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int64_t groups, double eps) {
    const Shape& s = x->value.shape();
    if (s.size() != 4) throw std::invalid_argument("group_norm: expects NCHW");
    const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    if (C % groups) throw std::invalid_argument("group_norm: channels not divisible by groups");
    if (gamma->value.numel() != C || beta->value.numel() != C)
        throw std::invalid_argument("group_norm: affine params must have size C");
    const int64_t cg = C / groups;
    const int64_t m = cg * H * W;

    auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(B * groups));
    auto istd = std::make_shared<std::vector<double>>(static_cast<size_t>(B * groups));
    Tensor value(s);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t g = 0; g < groups; ++g) {
            const double* src = x->value.data() + (b * C + g * cg) * H * W;
            double sum = 0.0, sum2 = 0.0;
            for (int64_t i = 0; i < m; ++i) {
                sum += src[i];
                sum2 += src[i] * src[i];
            }
            const double mean = sum / m;
            const double var = std::max(0.0, sum2 / m - mean * mean);
            const double is = 1.0 / std::sqrt(var + eps);
            (*mu)[b * groups + g] = mean;
            (*istd)[b * groups + g] = is;
            double* dst = value.data() + (b * C + g * cg) * H * W;
            for (int64_t c = 0; c < cg; ++c) {
                const double ga = gamma->value[g * cg + c], be = beta->value[g * cg + c];
                const double* sp = src + c * H * W;
                double* dp = dst + c * H * W;
                for (int64_t i = 0; i < H * W; ++i) dp[i] = ga * (sp[i] - mean) * is + be;
            }
        }

    return make_node(std::move(value), {x, gamma, beta},
                     [x, gamma, beta, B, C, H, W, groups, cg, m, mu, istd](Node& self) {
                         const int64_t hw = H * W;
                         for (int64_t b = 0; b < B; ++b)
                             for (int64_t g = 0; g < groups; ++g) {
                                 const double mean = (*mu)[b * groups + g];
                                 const double is = (*istd)[b * groups + g];
                                 const double* xv = x->value.data() + (b * C + g * cg) * hw;
                                 const double* gv = self.grad.data() + (b * C + g * cg) * hw;
                                 // dgamma/dbeta
                                 if (gamma->requires_grad) {
                                     Tensor& gg = gamma->ensure_grad();
                                     Tensor& gb = beta->ensure_grad();
                                     for (int64_t c = 0; c < cg; ++c) {
                                         double sg = 0.0, sb = 0.0;
                                         for (int64_t i = 0; i < hw; ++i) {
                                             const double xh = (xv[c * hw + i] - mean) * is;
                                             sg += gv[c * hw + i] * xh;
                                             sb += gv[c * hw + i];
                                         }
                                         gg[g * cg + c] += sg;
                                         gb[g * cg + c] += sb;
                                     }
                                 }
                                 if (x->requires_grad) {
                                     double s1 = 0.0, s2 = 0.0;
                                     for (int64_t c = 0; c < cg; ++c) {
                                         const double ga = gamma->value[g * cg + c];
                                         for (int64_t i = 0; i < hw; ++i) {
                                             const double dxh = gv[c * hw + i] * ga;
                                             const double xh = (xv[c * hw + i] - mean) * is;
                                             s1 += dxh;
                                             s2 += dxh * xh;
                                         }
                                     }
                                     Tensor& gx = x->ensure_grad();
                                     double* gxp = gx.data() + (b * C + g * cg) * hw;
                                     for (int64_t c = 0; c < cg; ++c) {
                                         const double ga = gamma->value[g * cg + c];
                                         for (int64_t i = 0; i < hw; ++i) {
                                             const double dxh = gv[c * hw + i] * ga;
                                             const double xh = (xv[c * hw + i] - mean) * is;
                                             gxp[c * hw + i] += is * (dxh - (s1 + xh * s2) / m);
                                         }
                                     }
                                 }
                             }
                     });
}

// ---------- composites ----------

Var mse_loss(const Var& a, const Var& b) { return mean_all(square(sub(a, b))); }
Var l1_loss(const Var& a, const Var& b) { return mean_all(abs(sub(a, b))); }

}  // namespace reqvae::ad
