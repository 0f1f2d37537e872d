#pragma once

#include <string>
#include <vector>

#include "satgeo/camera.hpp"
#include "satgeo/dsm.hpp"
#include "satgeo/image_io.hpp"

namespace satgeo {

// Projects every pixel's surface point into the grid (per-cell mean of
// contributing altitudes); empty cells are filled by the nearest valid cell
// within a radius of 3 cells, remaining ones stay nodata. `q` is the
// per-image pixel adjustment the depth map was rendered with.
DsmGrid extract_dsm(const FloatImage& depth, const SatCamera& cam, const SceneFrame& frame,
                    const DsmGrid& grid_spec, const Vec2& q = Vec2(0, 0));

// Vertical alignment offset = median(gt - pred) over co-valid cells.
// Errors when fewer than 10% of cells are co-valid.
double align_dsm(const DsmGrid& pred, const DsmGrid& gt);
void add_offset(DsmGrid& g, double offset);

// Mean absolute altitude error over co-valid (and mask-passing) cells of
// aligned grids. Mask pixels > 127 are included.
double mae(const DsmGrid& pred, const DsmGrid& gt, const Image* mask = nullptr);

// 10*log10(1/MSE) for [0,1] images; returns +inf when MSE is zero.
double psnr(const FloatImage& img, const FloatImage& gt, const Image* mask = nullptr);
double psnr(const Image& img, const Image& gt, const Image* mask = nullptr);

struct ViewReport {
    int image_id = 0;
    double mae_m = 0;
    double psnr_db = 0;
};

struct EvalReport {
    std::vector<ViewReport> per_view;
    double mean_mae_m = 0;
    double mean_psnr_db = 0;
};

std::string eval_report_to_json(const EvalReport& r);
void save_eval_report(const std::string& path, const EvalReport& r);

}  // namespace satgeo
