#include "satgeo/rendering.hpp"

#include <cmath>

namespace satgeo {

namespace {
RaySamples samples_from_offsets(const Ray& ray, int n, const std::vector<double>& offsets) {
    RaySamples s;
    s.t.resize(size_t(n));
    s.delta.resize(size_t(n));
    double len = ray.t_far - ray.t_near;
    double bin = len / n;
    double prev = ray.t_near;
    for (int i = 0; i < n; ++i) {
        double t = ray.t_near + (i + offsets[size_t(i)]) * bin;
        s.t[size_t(i)] = t;
        s.delta[size_t(i)] = t - prev;
        prev = t;
    }
    return s;
}
}  // namespace

RaySamples stratified_sample(const Ray& ray, int n, Rng& rng) {
    if (n < 2) throw ConfigError("stratified_sample: need at least 2 samples");
    std::vector<double> off(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) off[size_t(i)] = rng.uniform();
    return samples_from_offsets(ray, n, off);
}

RaySamples midpoint_sample(const Ray& ray, int n) {
    if (n < 2) throw ConfigError("midpoint_sample: need at least 2 samples");
    return samples_from_offsets(ray, n, std::vector<double>(size_t(n), 0.5));
}

Tensor alphas(const Tensor& sigma, const Tensor& delta) {
    return real(1) - exp(neg(mul(sigma, delta)));
}

Tensor transmittance(const Tensor& alpha) {
    const Shape& s = alpha.shape();
    if (s.empty()) throw ShapeError("transmittance: scalar input");
    int64_t n = s.back();
    int64_t rows = alpha.size() / n;
    std::vector<real> out(alpha.values().size());
    const real* pa = alpha.values().data();
    for (int64_t r = 0; r < rows; ++r) {
        double t = 1.0;
        for (int64_t i = 0; i < n; ++i) {
            out[size_t(r * n + i)] = real(t);
            t *= 1.0 - double(pa[r * n + i]);
        }
    }
    return Tensor::make_op(
        s, std::move(out), {alpha},
        [n, rows](const Node& self, const std::vector<real>& g, GradMap& gm) {
            const Node* na = self.parents[0].get();
            if (!na->requires_grad) return;
            std::vector<real>& ga = gm.buffer(na);
            // dL/dalpha_j = -T_j * S_j with S_j = g_{j+1} + (1-alpha_{j+1}) S_{j+1};
            // the suffix recurrence avoids dividing by (1 - alpha).
            for (int64_t r = 0; r < rows; ++r) {
                double S = 0.0;
                for (int64_t j = n - 2; j >= 0; --j) {
                    S = double(g[size_t(r * n + j + 1)]) +
                        (1.0 - double(na->values[size_t(r * n + j + 1)])) * S;
                    ga[size_t(r * n + j)] += real(-double(self.values[size_t(r * n + j)]) * S);
                }
            }
        });
}

Tensor render_weights(const Tensor& alpha) { return mul(transmittance(alpha), alpha); }

Tensor composite(const Tensor& weights, const Tensor& values) {
    if (values.ndim() == weights.ndim()) return sum(mul(weights, values), -1);
    if (values.ndim() == weights.ndim() + 1) {
        Shape ws = weights.shape();
        ws.push_back(1);
        return sum(mul(reshape(weights, ws), values), -2);
    }
    throw ShapeError("composite: weights " + shape_str(weights.shape()) + " and values " +
                     shape_str(values.shape()) + " do not align");
}

Tensor color_loss(const Tensor& rendered, const Tensor& gt) {
    Tensor d = sub(rendered, gt);
    return mean(sum(mul(d, d), -1));
}

Tensor uncertainty_loss(const Tensor& rendered, const Tensor& gt, const Tensor& beta_r,
                        const Tensor& tau_r) {
    int64_t R = rendered.shape()[0];
    Tensor beta = beta_r.ndim() == 2 ? reshape(beta_r, {R}) : beta_r;
    Tensor tau = tau_r.ndim() == 2 ? reshape(tau_r, {R}) : tau_r;
    Tensor beta_eff = mul(beta, real(1) + tau);
    Tensor d = sub(rendered, gt);
    Tensor err2 = sum(mul(d, d), -1);  // [R]
    Tensor per_ray = div(err2, real(2) * mul(beta_eff, beta_eff)) +
                     (log(beta_eff) + real(kUncertaintyEta)) * real(0.5);
    return mean(per_ray);
}

}  // namespace satgeo
