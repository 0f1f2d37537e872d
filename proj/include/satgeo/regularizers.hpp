#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "satgeo/camera.hpp"
#include "satgeo/common.hpp"
#include "satgeo/tensor.hpp"

namespace satgeo {

// Patches whose cross product is shorter than this are degenerate and are
// excluded from the planarity loss (zero gradient, not an error).
inline constexpr double kDegenerateNormalEps = 1e-8;

// ---- explicit surface normals -------------------------------------------

// Plain-geometry normal for oracles and ground-truth paths:
// n = s_x * s_y * normalize((p1 - p) x (p2 - p)).
struct NormalResult {
    Vec3 n;
    bool degenerate = false;
};
NormalResult explicit_normal(const Vec3& p, const Vec3& p1, const Vec3& p2, int s_x, int s_y);

// Differentiable batch version. p/p1/p2 are [R,3] surface points of the main
// and adjacent rays; sign_prod holds s_x*s_y per row. Degenerate rows are
// dropped before normalization so no non-finite value ever enters the graph.
struct NormalBatch {
    Tensor n;                   // [V,3] unit normals, canonicalized by sign
    std::vector<int64_t> rows;  // original row per valid normal
    int64_t total_rows = 0;
};
NormalBatch explicit_normal_batch(const Tensor& p, const Tensor& p1, const Tensor& p2,
                                  const std::vector<real>& sign_prod);

// Mean over valid patches of ||g - n||_2 (per-patch value in [0,2]).
// Returns a constant zero when every patch is degenerate.
Tensor planarity_loss(const NormalBatch& patches, const Vec3& g = Vec3(0, 0, 1));

// ---- depth supervision ---------------------------------------------------

struct SparseDepthPoint {
    Vec3 x;  // normalized scene frame
    int image_id = 0;
    int u = 0, v = 0;
    double weight = 1.0;  // derived from the reprojection error
};

// w(e) = 1 / (1 + e), clamped to [0.1, 1].
double reproj_weight(double err_px);

// Weighted squared error between rendered depth and the geometric distance
// from ray origin to the known point. Points whose target distance falls
// outside the ray span are excluded and counted.
struct DepthSupervision {
    Tensor loss;  // scalar, mean over used points (zero when none)
    int used = 0;
    int skipped = 0;
};
DepthSupervision depth_supervised_loss(const Tensor& pred_depth,                  // [P]
                                       const std::vector<double>& target_dist,    // ||X - o||
                                       const std::vector<double>& weights,        // w(r) > 0
                                       const std::vector<std::pair<double, double>>& spans);

// Sparse-point CSV: header image_id,u,v,x,y,z,reproj_err_px with x/y/z in
// scene UTM meters. Loading converts into the normalized frame and derives
// the weights.
struct SparsePointRecord {
    int image_id = 0;
    int u = 0, v = 0;
    Vec3 xyz_utm;
    double reproj_err_px = 0;
};
void save_sparse_points_csv(const std::string& path, const std::vector<SparsePointRecord>& recs);
std::vector<SparseDepthPoint> load_sparse_points_csv(const std::string& path,
                                                     const SceneFrame& frame);
std::vector<SparsePointRecord> read_sparse_point_records(const std::string& path);

// ---- schedule ------------------------------------------------------------

struct ScheduleConfig {
    int64_t total_iterations = 1;
    int64_t iters_per_epoch = 1;  // ceil(training pixels / batch)
    double lambda_planar = 0.1;
    double lambda_ds = 1000.0;
    double ds_fraction = 0.25;
    int64_t granularity_T = 1;  // floor(granularity_fraction * total_iterations)
    bool enable_planarity = true;
    bool enable_granularity = true;
    bool enable_ds = true;
    int planarity_start_epoch = 3;    // 1-based; also the uncertainty switch
    int uncertainty_start_epoch = 3;  // color loss for the first two epochs
    void validate() const;
};

struct ScheduleState {
    bool uncertainty_mode = false;
    double lambda_planar = 0;
    double lambda_ds = 0;
    int64_t mask_iter = 0;  // iteration fed to the granularity mask
};

// Piecewise-constant weights; epoch is 1-based.
ScheduleState loss_schedule(int64_t iter, int epoch, const ScheduleConfig& cfg);

}  // namespace satgeo
