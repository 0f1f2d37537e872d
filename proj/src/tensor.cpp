#include "satgeo/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace satgeo {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

int64_t shape_size(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

// ---------------------------------------------------------------- GradMap

std::vector<real>& GradMap::buffer(const Node* n) {
    auto it = grads_.find(n);
    if (it == grads_.end()) {
        it = grads_.emplace(n, std::vector<real>(n->values.size(), real(0))).first;
    }
    return it->second;
}

const std::vector<real>* GradMap::find(const Node* n) const {
    auto it = grads_.find(n);
    return it == grads_.end() ? nullptr : &it->second;
}

const std::vector<real>& GradMap::get(const Tensor& t) const {
    const std::vector<real>* g = find(t.node());
    if (!g) throw Error("GradMap::get: tensor has no gradient entry");
    return *g;
}

std::vector<real> GradMap::get_or_zero(const Tensor& t) const {
    const std::vector<real>* g = find(t.node());
    if (g) return *g;
    return std::vector<real>(t.values().size(), real(0));
}

bool GradMap::contains(const Tensor& t) const { return find(t.node()) != nullptr; }

// ---------------------------------------------------------------- Tensor

Tensor Tensor::from(Shape shape, std::vector<real> values, bool requires_grad) {
    if (shape_size(shape) != int64_t(values.size()))
        throw ShapeError("Tensor::from: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, const std::vector<double>& values, bool requires_grad) {
    std::vector<real> v(values.size());
    for (size_t i = 0; i < values.size(); ++i) v[i] = real(values[i]);
    return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    size_t n = size_t(shape_size(shape));
    return from(std::move(shape), std::vector<real>(n, real(0)), requires_grad);
}

Tensor Tensor::full(Shape shape, real v, bool requires_grad) {
    size_t n = size_t(shape_size(shape));
    return from(std::move(shape), std::vector<real>(n, v), requires_grad);
}

Tensor Tensor::scalar(real v, bool requires_grad) { return from({}, std::vector<real>{v}, requires_grad); }

Tensor Tensor::uniform(Shape shape, real lo, real hi, Rng& rng, bool requires_grad) {
    size_t n = size_t(shape_size(shape));
    std::vector<real> v(n);
    for (size_t i = 0; i < n; ++i) v[i] = real(rng.uniform(double(lo), double(hi)));
    return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::normal(Shape shape, real mean, real stddev, Rng& rng, bool requires_grad) {
    size_t n = size_t(shape_size(shape));
    std::vector<real> v(n);
    for (size_t i = 0; i < n; ++i) v[i] = real(rng.normal(double(mean), double(stddev)));
    return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::make_op(Shape shape, std::vector<real> values, std::vector<Tensor> parents,
                       std::function<void(const Node&, const std::vector<real>&, GradMap&)> backward) {
    bool rg = false;
    for (const Tensor& p : parents) rg = rg || p.requires_grad();
    if (!rg || !backward) return from(std::move(shape), std::move(values), false);
    if (shape_size(shape) != int64_t(values.size()))
        throw ShapeError("make_op: shape " + shape_str(shape) + " does not match value count");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) n->parents.push_back(p.node_ptr());
    n->backward = std::move(backward);
    return Tensor(std::move(n));
}

real Tensor::value() const {
    if (size() != 1) throw ShapeError("Tensor::value: tensor is not scalar, shape " + shape_str(shape()));
    return node_->values[0];
}

Tensor Tensor::detach() const { return from(node_->shape, node_->values, false); }

void Tensor::set_values(const std::vector<real>& v) {
    if (!node_->parents.empty() || node_->backward)
        throw Error("Tensor::set_values: only leaf tensors may be updated in place");
    if (v.size() != node_->values.size())
        throw ShapeError("Tensor::set_values: size mismatch");
    node_->values = v;
}

// ----------------------------------------------------- broadcasting helpers

Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (size_t i = 0; i < nd; ++i) {
        int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

namespace {

// Per-output-dim element strides into a tensor aligned on trailing axes;
// zero stride marks a broadcast dimension.
std::vector<int64_t> bcast_strides(const Shape& t, const Shape& out) {
    size_t nd = out.size();
    std::vector<int64_t> st(nd, 0);
    // native strides of t
    std::vector<int64_t> nat(t.size());
    int64_t acc = 1;
    for (size_t i = t.size(); i-- > 0;) {
        nat[i] = acc;
        acc *= t[i];
    }
    size_t off = nd - t.size();
    for (size_t i = 0; i < t.size(); ++i) {
        st[off + i] = (t[i] == 1 && out[off + i] != 1) ? 0 : nat[i];
    }
    return st;
}

// Iterates the broadcast space, calling f(out_idx, a_idx, b_idx).
template <class F>
void bcast_iterate(const Shape& out, const std::vector<int64_t>& sa, const std::vector<int64_t>& sb, F&& f) {
    int64_t total = shape_size(out);
    size_t nd = out.size();
    if (nd == 0) {
        f(0, 0, 0);
        return;
    }
    std::vector<int64_t> idx(nd, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t o = 0; o < total; ++o) {
        f(o, ia, ib);
        for (size_t d = nd; d-- > 0;) {
            idx[d]++;
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

using BackFn = std::function<void(const Node&, const std::vector<real>&, GradMap&)>;

// Generic elementwise binary op. fwd(a,b) -> out; da(a,b,g) and db(a,b,g)
// give the local gradient contributions.
template <class Fwd, class Da, class Db>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Da da, Db db) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as == bs) {
        size_t n = a.values().size();
        std::vector<real> out(n);
        const real* pa = a.values().data();
        const real* pb = b.values().data();
        for (size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
        return Tensor::make_op(
            as, std::move(out), {a, b},
            [da, db](const Node& self, const std::vector<real>& g, GradMap& gm) {
                const Node* na = self.parents[0].get();
                const Node* nb = self.parents[1].get();
                size_t n = g.size();
                if (na->requires_grad) {
                    std::vector<real>& ga = gm.buffer(na);
                    for (size_t i = 0; i < n; ++i) ga[i] += da(na->values[i], nb->values[i], g[i]);
                }
                if (nb->requires_grad) {
                    std::vector<real>& gb = gm.buffer(nb);
                    for (size_t i = 0; i < n; ++i) gb[i] += db(na->values[i], nb->values[i], g[i]);
                }
            });
    }
    Shape os;
    try {
        os = broadcast_shape(as, bs);
    } catch (const ShapeError&) {
        throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(as) + " and " +
                         shape_str(bs));
    }
    // fast path: one operand is a trailing suffix of the other (bias adds,
    // scalar broadcasts)
    auto is_suffix = [](const Shape& small, const Shape& big) {
        if (small.size() > big.size()) return false;
        for (size_t i = 0; i < small.size(); ++i)
            if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
        return true;
    };
    if (os == as && is_suffix(bs, as)) {
        size_t n = a.values().size();
        size_t c = b.values().size();
        std::vector<real> out(n);
        const real* pa = a.values().data();
        const real* pb = b.values().data();
        for (size_t r = 0; r < n; r += c)
            for (size_t k = 0; k < c; ++k) out[r + k] = fwd(pa[r + k], pb[k]);
        return Tensor::make_op(
            as, std::move(out), {a, b},
            [da, db, c](const Node& self, const std::vector<real>& g, GradMap& gm) {
                const Node* na = self.parents[0].get();
                const Node* nb = self.parents[1].get();
                size_t n = g.size();
                if (na->requires_grad) {
                    std::vector<real>& ga = gm.buffer(na);
                    for (size_t r = 0; r < n; r += c)
                        for (size_t k = 0; k < c; ++k)
                            ga[r + k] += da(na->values[r + k], nb->values[k], g[r + k]);
                }
                if (nb->requires_grad) {
                    std::vector<real>& gb = gm.buffer(nb);
                    for (size_t r = 0; r < n; r += c)
                        for (size_t k = 0; k < c; ++k)
                            gb[k] += db(na->values[r + k], nb->values[k], g[r + k]);
                }
            });
    }
    if (os == bs && is_suffix(as, bs)) {
        size_t n = b.values().size();
        size_t c = a.values().size();
        std::vector<real> out(n);
        const real* pa = a.values().data();
        const real* pb = b.values().data();
        for (size_t r = 0; r < n; r += c)
            for (size_t k = 0; k < c; ++k) out[r + k] = fwd(pa[k], pb[r + k]);
        return Tensor::make_op(
            bs, std::move(out), {a, b},
            [da, db, c](const Node& self, const std::vector<real>& g, GradMap& gm) {
                const Node* na = self.parents[0].get();
                const Node* nb = self.parents[1].get();
                size_t n = g.size();
                if (na->requires_grad) {
                    std::vector<real>& ga = gm.buffer(na);
                    for (size_t r = 0; r < n; r += c)
                        for (size_t k = 0; k < c; ++k)
                            ga[k] += da(na->values[k], nb->values[r + k], g[r + k]);
                }
                if (nb->requires_grad) {
                    std::vector<real>& gb = gm.buffer(nb);
                    for (size_t r = 0; r < n; r += c)
                        for (size_t k = 0; k < c; ++k)
                            gb[r + k] += db(na->values[k], nb->values[r + k], g[r + k]);
                }
            });
    }
    auto sa = bcast_strides(as, os);
    auto sb = bcast_strides(bs, os);
    std::vector<real> out(size_t(shape_size(os)));
    const real* pa = a.values().data();
    const real* pb = b.values().data();
    bcast_iterate(os, sa, sb,
                  [&](int64_t o, int64_t ia, int64_t ib) { out[size_t(o)] = fwd(pa[ia], pb[ib]); });
    return Tensor::make_op(
        os, std::move(out), {a, b},
        [da, db, sa, sb, os](const Node& self, const std::vector<real>& g, GradMap& gm) {
            const Node* na = self.parents[0].get();
            const Node* nb = self.parents[1].get();
            std::vector<real>* ga = na->requires_grad ? &gm.buffer(na) : nullptr;
            std::vector<real>* gb = nb->requires_grad ? &gm.buffer(nb) : nullptr;
            bcast_iterate(os, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
                real va = na->values[size_t(ia)];
                real vb = nb->values[size_t(ib)];
                if (ga) (*ga)[size_t(ia)] += da(va, vb, g[size_t(o)]);
                if (gb) (*gb)[size_t(ib)] += db(va, vb, g[size_t(o)]);
            });
        });
}

// Generic elementwise unary op; backward receives (x, y, g) with y the
// forward output value.
template <class Fwd, class Dx>
Tensor unary_op(const Tensor& a, Fwd fwd, Dx dx) {
    size_t n = a.values().size();
    std::vector<real> out(n);
    const real* pa = a.values().data();
    for (size_t i = 0; i < n; ++i) out[i] = fwd(pa[i]);
    return Tensor::make_op(a.shape(), std::move(out), {a},
                           [dx](const Node& self, const std::vector<real>& g, GradMap& gm) {
                               const Node* na = self.parents[0].get();
                               if (!na->requires_grad) return;
                               std::vector<real>& ga = gm.buffer(na);
                               for (size_t i = 0; i < g.size(); ++i)
                                   ga[i] += dx(na->values[i], self.values[i], g[i]);
                           });
}

}  // namespace

// ---------------------------------------------------------------- ops

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "add", [](real x, real y) { return x + y; },
        [](real, real, real g) { return g; }, [](real, real, real g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "sub", [](real x, real y) { return x - y; },
        [](real, real, real g) { return g; }, [](real, real, real g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "mul", [](real x, real y) { return x * y; },
        [](real, real y, real g) { return g * y; }, [](real x, real, real g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "div", [](real x, real y) { return x / y; },
        [](real, real y, real g) { return g / y; },
        [](real x, real y, real g) { return -g * x / (y * y); });
}

Tensor neg(const Tensor& a) {
    return unary_op(a, [](real x) { return -x; }, [](real, real, real g) { return -g; });
}

Tensor exp(const Tensor& a) {
    return unary_op(a, [](real x) { return std::exp(x); },
                    [](real, real y, real g) { return g * y; });
}

Tensor log(const Tensor& a) {
    for (real x : a.values())
        if (!(x > real(0))) throw DomainError("log: non-positive input " + std::to_string(double(x)));
    return unary_op(a, [](real x) { return std::log(x); },
                    [](real x, real, real g) { return g / x; });
}

Tensor sqrt(const Tensor& a) {
    for (real x : a.values())
        if (x < real(0)) throw DomainError("sqrt: negative input " + std::to_string(double(x)));
    return unary_op(a, [](real x) { return std::sqrt(x); },
                    [](real, real y, real g) { return y > real(0) ? g / (real(2) * y) : real(0); });
}

Tensor sin(const Tensor& a) {
    return unary_op(a, [](real x) { return std::sin(x); },
                    [](real x, real, real g) { return g * std::cos(x); });
}

Tensor cos(const Tensor& a) {
    return unary_op(a, [](real x) { return std::cos(x); },
                    [](real x, real, real g) { return -g * std::sin(x); });
}

Tensor relu(const Tensor& a) {
    return unary_op(a, [](real x) { return x > real(0) ? x : real(0); },
                    [](real x, real, real g) { return x > real(0) ? g : real(0); });
}

namespace {
inline real sigmoid_stable(real x) {
    if (x >= real(0)) return real(1) / (real(1) + std::exp(-x));
    real e = std::exp(x);
    return e / (real(1) + e);
}
}  // namespace

Tensor sigmoid(const Tensor& a) {
    return unary_op(a, [](real x) { return sigmoid_stable(x); },
                    [](real, real y, real g) { return g * y * (real(1) - y); });
}

Tensor softplus(const Tensor& a) {
    // overflow-safe: max(x,0) + log1p(exp(-|x|))
    return unary_op(a,
                    [](real x) {
                        return std::max(x, real(0)) + real(std::log1p(std::exp(-std::abs(double(x)))));
                    },
                    [](real x, real, real g) { return g * sigmoid_stable(x); });
}

Tensor clamp(const Tensor& a, real lo, real hi) {
    if (!(lo <= hi)) throw ConfigError("clamp: lo > hi");
    return unary_op(a,
                    [lo, hi](real x) { return std::min(std::max(x, lo), hi); },
                    [lo, hi](real x, real, real g) { return (x >= lo && x <= hi) ? g : real(0); });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
    double acc = 0;
    for (real x : a.values()) acc += double(x);
    return Tensor::make_op({}, {real(acc)}, {a},
                           [](const Node& self, const std::vector<real>& g, GradMap& gm) {
                               const Node* na = self.parents[0].get();
                               if (!na->requires_grad) return;
                               std::vector<real>& ga = gm.buffer(na);
                               for (real& v : ga) v += g[0];
                           });
}

namespace {
int normalize_axis(int axis, int64_t nd, const char* name) {
    int ax = axis < 0 ? axis + int(nd) : axis;
    if (ax < 0 || ax >= nd) throw ShapeError(std::string(name) + ": axis out of range");
    return ax;
}

void axis_extents(const Shape& s, int ax, int64_t& pre, int64_t& n, int64_t& post) {
    pre = 1;
    for (int i = 0; i < ax; ++i) pre *= s[size_t(i)];
    n = s[size_t(ax)];
    post = 1;
    for (size_t i = size_t(ax) + 1; i < s.size(); ++i) post *= s[i];
}

Shape reduced_shape(const Shape& s, int ax, bool keepdim) {
    Shape out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (int(i) == ax) {
            if (keepdim) out.push_back(1);
        } else {
            out.push_back(s[i]);
        }
    }
    return out;
}
}  // namespace

Tensor sum(const Tensor& a, int axis, bool keepdim) {
    int ax = normalize_axis(axis, a.ndim(), "sum");
    int64_t pre, n, post;
    axis_extents(a.shape(), ax, pre, n, post);
    std::vector<real> out(size_t(pre * post));
    const real* pa = a.values().data();
    for (int64_t p = 0; p < pre; ++p)
        for (int64_t q = 0; q < post; ++q) {
            double acc = 0;
            for (int64_t k = 0; k < n; ++k) acc += double(pa[(p * n + k) * post + q]);
            out[size_t(p * post + q)] = real(acc);
        }
    return Tensor::make_op(reduced_shape(a.shape(), ax, keepdim), std::move(out), {a},
                           [pre, n, post](const Node& self, const std::vector<real>& g, GradMap& gm) {
                               const Node* na = self.parents[0].get();
                               if (!na->requires_grad) return;
                               std::vector<real>& ga = gm.buffer(na);
                               for (int64_t p = 0; p < pre; ++p)
                                   for (int64_t k = 0; k < n; ++k)
                                       for (int64_t q = 0; q < post; ++q)
                                           ga[size_t((p * n + k) * post + q)] += g[size_t(p * post + q)];
                           });
}

Tensor mean(const Tensor& a) {
    int64_t n = a.size();
    if (n == 0) throw ShapeError("mean: empty tensor");
    double acc = 0;
    for (real x : a.values()) acc += double(x);
    real inv = real(1.0 / double(n));
    return Tensor::make_op({}, {real(acc / double(n))}, {a},
                           [inv](const Node& self, const std::vector<real>& g, GradMap& gm) {
                               const Node* na = self.parents[0].get();
                               if (!na->requires_grad) return;
                               std::vector<real>& ga = gm.buffer(na);
                               for (real& v : ga) v += g[0] * inv;
                           });
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
    int ax = normalize_axis(axis, a.ndim(), "mean");
    int64_t nax = a.shape()[size_t(ax)];
    Tensor s = sum(a, ax, keepdim);
    return s * real(1.0 / double(nax));
}

Tensor norm(const Tensor& a, int axis, bool keepdim) {
    int ax = normalize_axis(axis, a.ndim(), "norm");
    int64_t pre, n, post;
    axis_extents(a.shape(), ax, pre, n, post);
    std::vector<real> out(size_t(pre * post));
    const real* pa = a.values().data();
    for (int64_t p = 0; p < pre; ++p)
        for (int64_t q = 0; q < post; ++q) {
            double acc = 0;
            for (int64_t k = 0; k < n; ++k) {
                double v = double(pa[(p * n + k) * post + q]);
                acc += v * v;
            }
            out[size_t(p * post + q)] = real(std::sqrt(acc));
        }
    return Tensor::make_op(
        reduced_shape(a.shape(), ax, keepdim), std::move(out), {a},
        [pre, n, post](const Node& self, const std::vector<real>& g, GradMap& gm) {
            const Node* na = self.parents[0].get();
            if (!na->requires_grad) return;
            std::vector<real>& ga = gm.buffer(na);
            for (int64_t p = 0; p < pre; ++p)
                for (int64_t q = 0; q < post; ++q) {
                    real nv = self.values[size_t(p * post + q)];
                    if (nv <= real(0)) continue;  // subgradient 0 at the cone point
                    real go = g[size_t(p * post + q)] / nv;
                    for (int64_t k = 0; k < n; ++k) {
                        size_t idx = size_t((p * n + k) * post + q);
                        ga[idx] += go * na->values[idx];
                    }
                }
        });
}

// ---------------------------------------------------------------- shape ops

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_size(shape) != a.size())
        throw ShapeError("reshape: cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    return Tensor::make_op(std::move(shape), a.values(), {a},
                           [](const Node& self, const std::vector<real>& g, GradMap& gm) {
                               const Node* na = self.parents[0].get();
                               if (!na->requires_grad) return;
                               std::vector<real>& ga = gm.buffer(na);
                               for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
    Shape os = broadcast_shape(a.shape(), shape);
    if (os != shape)
        throw ShapeError("broadcast_to: cannot broadcast " + shape_str(a.shape()) + " to " +
                         shape_str(shape));
    auto sa = bcast_strides(a.shape(), os);
    auto sz = sa;  // dummy second operand
    std::fill(sz.begin(), sz.end(), 0);
    std::vector<real> out(size_t(shape_size(os)));
    const real* pa = a.values().data();
    bcast_iterate(os, sa, sz, [&](int64_t o, int64_t ia, int64_t) { out[size_t(o)] = pa[ia]; });
    return Tensor::make_op(os, std::move(out), {a},
                           [sa, sz, os](const Node& self, const std::vector<real>& g, GradMap& gm) {
                               const Node* na = self.parents[0].get();
                               if (!na->requires_grad) return;
                               std::vector<real>& ga = gm.buffer(na);
                               bcast_iterate(os, sa, sz, [&](int64_t o, int64_t ia, int64_t) {
                                   ga[size_t(ia)] += g[size_t(o)];
                               });
                           });
}

Tensor concat(const std::vector<Tensor>& ts, int axis) {
    if (ts.empty()) throw ShapeError("concat: no tensors");
    int ax = normalize_axis(axis, ts[0].ndim(), "concat");
    Shape os = ts[0].shape();
    int64_t total_ax = 0;
    for (const Tensor& t : ts) {
        if (t.ndim() != ts[0].ndim())
            throw ShapeError("concat: rank mismatch " + shape_str(t.shape()) + " vs " +
                             shape_str(ts[0].shape()));
        for (int64_t d = 0; d < t.ndim(); ++d)
            if (d != ax && t.shape()[size_t(d)] != os[size_t(d)])
                throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                                 shape_str(ts[0].shape()));
        total_ax += t.shape()[size_t(ax)];
    }
    os[size_t(ax)] = total_ax;
    int64_t pre, ntot, post;
    axis_extents(os, ax, pre, ntot, post);
    std::vector<real> out(size_t(pre * ntot * post));
    std::vector<int64_t> offsets;  // start of each input along the axis
    int64_t off = 0;
    for (const Tensor& t : ts) {
        offsets.push_back(off);
        int64_t nt = t.shape()[size_t(ax)];
        const real* pt = t.values().data();
        for (int64_t p = 0; p < pre; ++p)
            std::memcpy(&out[size_t((p * ntot + off) * post)], &pt[size_t(p * nt * post)],
                        size_t(nt * post) * sizeof(real));
        off += nt;
    }
    std::vector<Tensor> parents = ts;
    std::vector<int64_t> sizes;
    for (const Tensor& t : ts) sizes.push_back(t.shape()[size_t(ax)]);
    return Tensor::make_op(
        os, std::move(out), std::move(parents),
        [pre, ntot, post, offsets, sizes](const Node& self, const std::vector<real>& g, GradMap& gm) {
            for (size_t i = 0; i < self.parents.size(); ++i) {
                const Node* np = self.parents[i].get();
                if (!np->requires_grad) continue;
                std::vector<real>& gp = gm.buffer(np);
                int64_t nt = sizes[i];
                int64_t o = offsets[i];
                for (int64_t p = 0; p < pre; ++p)
                    for (int64_t k = 0; k < nt * post; ++k)
                        gp[size_t(p * nt * post + k)] += g[size_t((p * ntot + o) * post + k)];
            }
        });
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
    int ax = normalize_axis(axis, a.ndim(), "slice");
    int64_t n = a.shape()[size_t(ax)];
    if (start < 0 || len < 0 || start + len > n)
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of bounds for axis extent " + std::to_string(n));
    int64_t pre, nax, post;
    axis_extents(a.shape(), ax, pre, nax, post);
    Shape os = a.shape();
    os[size_t(ax)] = len;
    std::vector<real> out(size_t(pre * len * post));
    const real* pa = a.values().data();
    for (int64_t p = 0; p < pre; ++p)
        std::memcpy(&out[size_t(p * len * post)], &pa[size_t((p * nax + start) * post)],
                    size_t(len * post) * sizeof(real));
    return Tensor::make_op(os, std::move(out), {a},
                           [pre, nax, post, start, len](const Node& self, const std::vector<real>& g,
                                                        GradMap& gm) {
                               const Node* na = self.parents[0].get();
                               if (!na->requires_grad) return;
                               std::vector<real>& ga = gm.buffer(na);
                               for (int64_t p = 0; p < pre; ++p)
                                   for (int64_t k = 0; k < len * post; ++k)
                                       ga[size_t((p * nax + start) * post + k)] +=
                                           g[size_t(p * len * post + k)];
                           });
}

Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& idx) {
    if (a.ndim() != 2) throw ShapeError("gather_rows: expected 2-D tensor, got " + shape_str(a.shape()));
    int64_t rows = a.shape()[0];
    int64_t cols = a.shape()[1];
    for (int64_t i : idx)
        if (i < 0 || i >= rows)
            throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range [0, " +
                             std::to_string(rows) + ")");
    std::vector<real> out(idx.size() * size_t(cols));
    const real* pa = a.values().data();
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(&out[r * size_t(cols)], &pa[size_t(idx[r] * cols)], size_t(cols) * sizeof(real));
    return Tensor::make_op({int64_t(idx.size()), cols}, std::move(out), {a},
                           [idx, cols](const Node& self, const std::vector<real>& g, GradMap& gm) {
                               const Node* na = self.parents[0].get();
                               if (!na->requires_grad) return;
                               std::vector<real>& ga = gm.buffer(na);
                               for (size_t r = 0; r < idx.size(); ++r)
                                   for (int64_t c = 0; c < cols; ++c)
                                       ga[size_t(idx[r] * cols + c)] += g[r * size_t(cols) + size_t(c)];
                           });
}

// ----------------------------------------------------------- linear algebra

namespace {
using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatD to_mat(const std::vector<real>& v, int64_t r, int64_t c) {
    MatD m(r, c);
    for (int64_t i = 0; i < r * c; ++i) m.data()[i] = double(v[size_t(i)]);
    return m;
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw ShapeError("matmul: expected 2-D tensors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    int64_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    // accumulate in double regardless of the storage type
    MatD am = to_mat(a.values(), m, k);
    MatD bm = to_mat(b.values(), k, n);
    MatD cm = am * bm;
    std::vector<real> out(size_t(m * n));
    for (int64_t i = 0; i < m * n; ++i) out[size_t(i)] = real(cm.data()[i]);
    return Tensor::make_op(
        {m, n}, std::move(out), {a, b},
        [m, k, n](const Node& self, const std::vector<real>& g, GradMap& gm) {
            const Node* na = self.parents[0].get();
            const Node* nb = self.parents[1].get();
            MatD gmat = to_mat(g, m, n);
            if (na->requires_grad) {
                MatD bm = to_mat(nb->values, k, n);
                MatD da = gmat * bm.transpose();
                std::vector<real>& ga = gm.buffer(na);
                for (int64_t i = 0; i < m * k; ++i) ga[size_t(i)] += real(da.data()[i]);
            }
            if (nb->requires_grad) {
                MatD am = to_mat(na->values, m, k);
                MatD db = am.transpose() * gmat;
                std::vector<real>& gb = gm.buffer(nb);
                for (int64_t i = 0; i < k * n; ++i) gb[size_t(i)] += real(db.data()[i]);
            }
        });
}

Tensor cross(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.ndim() < 1 || a.shape().back() != 3)
        throw ShapeError("cross: expected matching [..., 3] shapes, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    size_t n = a.values().size();
    std::vector<real> out(n);
    const real* pa = a.values().data();
    const real* pb = b.values().data();
    for (size_t i = 0; i < n; i += 3) {
        out[i + 0] = pa[i + 1] * pb[i + 2] - pa[i + 2] * pb[i + 1];
        out[i + 1] = pa[i + 2] * pb[i + 0] - pa[i + 0] * pb[i + 2];
        out[i + 2] = pa[i + 0] * pb[i + 1] - pa[i + 1] * pb[i + 0];
    }
    return Tensor::make_op(a.shape(), std::move(out), {a, b},
                           [](const Node& self, const std::vector<real>& g, GradMap& gm) {
                               const Node* na = self.parents[0].get();
                               const Node* nb = self.parents[1].get();
                               const real* pa = na->values.data();
                               const real* pb = nb->values.data();
                               // dL/da = b x g, dL/db = g x a
                               if (na->requires_grad) {
                                   std::vector<real>& ga = gm.buffer(na);
                                   for (size_t i = 0; i < g.size(); i += 3) {
                                       ga[i + 0] += pb[i + 1] * g[i + 2] - pb[i + 2] * g[i + 1];
                                       ga[i + 1] += pb[i + 2] * g[i + 0] - pb[i + 0] * g[i + 2];
                                       ga[i + 2] += pb[i + 0] * g[i + 1] - pb[i + 1] * g[i + 0];
                                   }
                               }
                               if (nb->requires_grad) {
                                   std::vector<real>& gb = gm.buffer(nb);
                                   for (size_t i = 0; i < g.size(); i += 3) {
                                       gb[i + 0] += g[i + 1] * pa[i + 2] - g[i + 2] * pa[i + 1];
                                       gb[i + 1] += g[i + 2] * pa[i + 0] - g[i + 0] * pa[i + 2];
                                       gb[i + 2] += g[i + 0] * pa[i + 1] - g[i + 1] * pa[i + 0];
                                   }
                               }
                           });
}

// ---------------------------------------------------------------- backward

GradMap backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw Error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    GradMap gm;
    if (!loss.requires_grad()) return gm;

    // reverse post-order DFS over grad-requiring parents = topological order
    std::vector<const Node*> topo;
    std::unordered_set<const Node*> visited;
    struct Frame {
        const Node* n;
        size_t next;
    };
    std::vector<Frame> stack{{loss.node(), 0}};
    visited.insert(loss.node());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            const Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(f.n);
            stack.pop_back();
        }
    }

    gm.buffer(loss.node())[0] = real(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        const Node* n = *it;
        if (!n->backward) continue;
        const std::vector<real>* g = gm.find(n);
        if (!g) continue;
        n->backward(*n, *g, gm);
    }
    return gm;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    if (!(eps > 0.0) || eps > 1e-2) throw ConfigError("grad_check: eps must be in (0, 1e-2]");
    Tensor xg = Tensor::from(x.shape(), x.values(), true);
    Tensor y = f(xg);
    if (y.size() != 1) throw Error("grad_check: f must return a scalar");
    GradMap gm = backward(y);
    std::vector<real> analytic = gm.get_or_zero(xg);

    std::vector<real> v = x.values();
    double max_err = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        real orig = v[i];
        v[i] = real(double(orig) + eps);
        real hi_x = v[i];
        double fp = double(f(Tensor::from(x.shape(), v)).value());
        v[i] = real(double(orig) - eps);
        real lo_x = v[i];
        double fm = double(f(Tensor::from(x.shape(), v)).value());
        v[i] = orig;
        double h = double(hi_x) - double(lo_x);  // actual representable step
        double numeric = (fp - fm) / h;
        double err = std::abs(double(analytic[i]) - numeric) /
                     std::max(1.0, std::abs(double(analytic[i])));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace satgeo
