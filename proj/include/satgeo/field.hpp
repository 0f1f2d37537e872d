#pragma once

#include <array>
#include <string>
#include <vector>

#include "satgeo/common.hpp"
#include "satgeo/tensor.hpp"

namespace satgeo {

// Network architecture. Defaults follow the full-scale setup; desk presets
// shrink the backbone through the training config.
struct FieldArch {
    int backbone_layers = 8;
    int backbone_width = 256;
    int proj_width = 128;  // projection layer feeding the heads
    int embed_dim = 4;     // per-image embedding t_j
    int l_pos = 10;
    int l_dir = 4;
    real beta_min = real(0.05);
    int num_images = 0;

    int64_t pos_in() const { return 3 + 3 * 2 * int64_t(l_pos); }
    int64_t dir_in() const { return 3 + 3 * 2 * int64_t(l_dir); }
    void validate() const;
    uint64_t config_hash() const;
};

// All learnable state. Tensors are graph leaves with requires_grad set;
// the trainer updates them in place between steps.
struct FieldParams {
    FieldArch arch;
    std::vector<Tensor> backbone_w, backbone_b;
    Tensor sigma_w, sigma_b;
    Tensor proj_w, proj_b;
    Tensor albedo_w, albedo_b;
    Tensor ambient_w, ambient_b;
    Tensor beta_w, beta_b;
    Tensor tau_w, tau_b;
    Tensor embeddings;  // [J, E], N(0, 0.01^2)
    Tensor color_a;     // [J, 9], per-image affine A_j, identity init
    Tensor color_b;     // [J, 3], zero init
    Tensor pixel_q;     // [J, 2], zero init

    static FieldParams init(const FieldArch& arch, uint64_t seed);

    std::vector<Tensor*> parameters();  // stable order, defines checkpoint layout
    std::vector<const Tensor*> parameters() const;
    int64_t total_size() const;

    // Graph-free copy for inference paths (probe renders, full-frame views).
    FieldParams detached() const;
    void copy_values_from(const FieldParams& other);

    // Checkpoint: "SGNF" magic, u32 version, u64 config hash, flat
    // little-endian parameter array. Loading rejects a mismatched hash.
    void save(const std::string& path) const;
    static FieldParams load(const std::string& path, const FieldArch& arch);
};

// Batched field evaluation; all shapes lead with the sample count S.
struct FieldEval {
    Tensor sigma;    // [S, 1], softplus head
    Tensor albedo;   // [S, 3], sigmoid
    Tensor ambient;  // [S, 3], sigmoid
    Tensor beta;     // [S, 1], >= beta_min
    Tensor tau;      // [S, 1], sigmoid
};

FieldEval eval_field(const FieldParams& params, const Tensor& enc_x, const Tensor& enc_dir,
                     const Tensor& sun_dir, const std::vector<int64_t>& image_ids);

// Density-only fast path; shares the backbone + sigma head bit-for-bit with
// eval_field and skips everything else.
Tensor eval_density(const FieldParams& params, const Tensor& enc_x);

// Single-sample convenience mirror of the batched API.
struct FieldOutput {
    real sigma = 0;
    std::array<real, 3> albedo{};
    std::array<real, 3> ambient{};
    real beta = 0;
    real tau = 0;
};

FieldOutput eval_field_single(const FieldParams& params, const std::vector<real>& enc_x,
                              const std::vector<real>& enc_dir, const Vec3& sun_dir, int image_id);

// c = clamp(A * (albedo ⊙ (ambient + (1 - ambient) * s)) + b, 0, 1)
std::array<real, 3> compose_color(const FieldOutput& out, const std::array<real, 9>& A,
                                  const std::array<real, 3>& b, real s);

// Batched counterpart; A is [S, 9] row-major 3x3, s broadcastable to [S, 1].
Tensor compose_color_batch(const Tensor& albedo, const Tensor& ambient, const Tensor& A,
                           const Tensor& b, const Tensor& s);

}  // namespace satgeo
