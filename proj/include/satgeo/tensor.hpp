#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "satgeo/common.hpp"

namespace satgeo {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_size(const Shape& s);

class Tensor;
class GradMap;

// One record in the computation graph. Values are immutable once the node is
// built; gradients never live on the node (they live in a GradMap local to
// each backward call), so independent graphs sharing leaf nodes can run
// backward on different threads.
struct Node {
    Shape shape;
    std::vector<real> values;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads the incoming gradient of this node and accumulates into the
    // parents' buffers. Null for leaves and for ops recorded without grad.
    std::function<void(const Node&, const std::vector<real>&, GradMap&)> backward;
};

// Gradient buffers keyed by node, produced by backward(). A node that is
// absent has gradient exactly zero.
class GradMap {
  public:
    std::vector<real>& buffer(const Node* n);
    const std::vector<real>* find(const Node* n) const;
    const std::vector<real>& get(const Tensor& t) const;  // throws if absent
    // Gradient of a leaf; zeros when the leaf has no path to the loss.
    std::vector<real> get_or_zero(const Tensor& t) const;
    bool contains(const Tensor& t) const;

  private:
    std::unordered_map<const Node*, std::vector<real>> grads_;
};

// Value-semantics handle over a graph node.
class Tensor {
  public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false);
    static Tensor from(Shape shape, const std::vector<double>& values, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, real v, bool requires_grad = false);
    static Tensor scalar(real v, bool requires_grad = false);
    static Tensor uniform(Shape shape, real lo, real hi, Rng& rng, bool requires_grad = false);
    static Tensor normal(Shape shape, real mean, real stddev, Rng& rng, bool requires_grad = false);

    // Low-level factory for modules that define their own differentiable ops
    // (volume-rendering transmittance, fused encodings). `backward` may be
    // empty for non-differentiable results.
    static Tensor make_op(Shape shape, std::vector<real> values, std::vector<Tensor> parents,
                          std::function<void(const Node&, const std::vector<real>&, GradMap&)> backward);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t size() const { return int64_t(node_->values.size()); }
    int64_t ndim() const { return int64_t(node_->shape.size()); }
    bool requires_grad() const { return node_->requires_grad; }
    const std::vector<real>& values() const { return node_->values; }
    real value() const;                 // scalar tensors only
    real operator[](int64_t i) const { return node_->values[size_t(i)]; }

    Tensor detach() const;              // same values, no graph
    const Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

    // In-place value update for leaf parameters (optimizer step). Only legal
    // on leaves; graphs referencing the old values are already consumed by
    // the time the trainer calls this.
    void set_values(const std::vector<real>& v);

  private:
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    std::shared_ptr<Node> node_;
};

// ---- elementwise, broadcasting over trailing axes (size-1 stretching) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);   // domain error on x <= 0
Tensor sqrt(const Tensor& a);  // domain error on x < 0
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);  // max(x,0) + log1p(exp(-|x|))
Tensor clamp(const Tensor& a, real lo, real hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, real s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, real s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator*(const Tensor& a, real s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator/(const Tensor& a, real s) { return div(a, Tensor::scalar(s)); }
inline Tensor operator+(real s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(real s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(real s, const Tensor& a) { return mul(Tensor::scalar(s), a); }

// ---- reductions (64-bit accumulation) ----
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
// L2 norm along `axis`.
Tensor norm(const Tensor& a, int axis, bool keepdim = true);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor concat(const std::vector<Tensor>& ts, int axis);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
// rows of a 2-D tensor by index; backward scatter-adds.
Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& idx);

// ---- linear algebra / geometry ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K]x[K,N]
Tensor cross(const Tensor& a, const Tensor& b);   // last axis 3

// ---- autodiff ----
// Reverse pass from a scalar loss; visits each reachable node once in
// reverse topological order. Leaves with no path keep zero gradient.
GradMap backward(const Tensor& loss);

// Max over components of |analytic - central difference| / max(1, |analytic|).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-3);

// ---- broadcasting helpers (shared with modules that build custom ops) ----
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace satgeo
