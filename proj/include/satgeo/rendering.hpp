#pragma once

#include <vector>

#include "satgeo/camera.hpp"
#include "satgeo/common.hpp"
#include "satgeo/tensor.hpp"

namespace satgeo {

// Sample positions along one ray. delta[0] is measured from t_near.
struct RaySamples {
    std::vector<double> t;
    std::vector<double> delta;
};

// One uniform draw per equal-width bin of [t_near, t_far].
RaySamples stratified_sample(const Ray& ray, int n, Rng& rng);
// Evaluation mode: bin midpoints.
RaySamples midpoint_sample(const Ray& ray, int n);

// alpha_i = 1 - exp(-sigma_i * delta_i); shapes broadcast elementwise.
Tensor alphas(const Tensor& sigma, const Tensor& delta);

// T_1 = 1, T_{i+1} = T_i * (1 - alpha_i), along the last axis.
Tensor transmittance(const Tensor& alpha);

// w_i = T_i * alpha_i
Tensor render_weights(const Tensor& alpha);

// sum_i w_i * v_i along the sample axis. `values` may carry one trailing
// channel axis beyond `weights` ([..., N] against [..., N, C]).
Tensor composite(const Tensor& weights, const Tensor& values);

// Batch-mean of squared L2 color error (Eq.-(5)-style, averaged so lambda
// weights are batch-size independent).
Tensor color_loss(const Tensor& rendered, const Tensor& gt);

// Uncertainty-aware loss. The transient scalar widens the tolerance:
// beta_eff = beta_r * (1 + tau_r); per ray
//   ||c - gt||^2 / (2 beta_eff^2) + (log beta_eff + eta) / 2,  eta = 3.
// Batch-averaged. rendered/gt are [R,3]; beta_r/tau_r are [R] or [R,1].
Tensor uncertainty_loss(const Tensor& rendered, const Tensor& gt, const Tensor& beta_r,
                        const Tensor& tau_r);

inline constexpr double kUncertaintyEta = 3.0;

}  // namespace satgeo
