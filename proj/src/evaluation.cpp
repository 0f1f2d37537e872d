#include "satgeo/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace satgeo {

DsmGrid extract_dsm(const FloatImage& depth, const SatCamera& cam, const SceneFrame& frame,
                    const DsmGrid& grid_spec, const Vec2& q) {
    if (depth.channels != 1) throw ShapeError("extract_dsm: depth map must be single-channel");
    if (depth.width != cam.width || depth.height != cam.height)
        throw ShapeError("extract_dsm: depth map size does not match the camera");
    grid_spec.validate();

    DsmGrid g = DsmGrid::make(grid_spec.origin, grid_spec.resolution, grid_spec.width,
                              grid_spec.height);
    std::vector<double> sum(g.alt.size(), 0.0);
    std::vector<int> count(g.alt.size(), 0);

    int64_t contributing = 0;
    for (int v = 0; v < cam.height; ++v)
        for (int u = 0; u < cam.width; ++u) {
            float d = depth.at(u, v);
            if (!std::isfinite(d)) continue;
            Ray ray = make_ray(cam, frame, u, v, q);
            Vec3 p = frame.to_utm(surface_point(ray, double(d)));
            int col = int(std::floor((p.x - g.origin.x) / g.resolution));
            int row = int(std::floor((p.y - g.origin.y) / g.resolution));
            if (col < 0 || col >= g.width || row < 0 || row >= g.height) continue;
            size_t idx = size_t(row) * size_t(g.width) + size_t(col);
            sum[idx] += p.z;
            count[idx]++;
            contributing++;
        }
    if (contributing == 0) throw Error("extract_dsm: grid does not overlap the camera footprint");

    for (size_t i = 0; i < g.alt.size(); ++i)
        if (count[i] > 0) g.alt[i] = sum[i] / count[i];

    // nearest-neighbor fill within radius 3, from the pre-fill snapshot
    std::vector<double> filled = g.alt;
    for (int row = 0; row < g.height; ++row)
        for (int col = 0; col < g.width; ++col) {
            if (g.valid(col, row)) continue;
            double best = std::numeric_limits<double>::quiet_NaN();
            int best_d2 = std::numeric_limits<int>::max();
            for (int dy = -3; dy <= 3; ++dy)
                for (int dx = -3; dx <= 3; ++dx) {
                    int c = col + dx, r = row + dy;
                    if (c < 0 || c >= g.width || r < 0 || r >= g.height) continue;
                    if (!g.valid(c, r)) continue;
                    int d2 = dx * dx + dy * dy;
                    if (d2 < best_d2) {
                        best_d2 = d2;
                        best = g.at(c, r);
                    }
                }
            filled[size_t(row) * size_t(g.width) + size_t(col)] = best;
        }
    g.alt = std::move(filled);
    return g;
}

double align_dsm(const DsmGrid& pred, const DsmGrid& gt) {
    if (!pred.same_geometry(gt)) throw ShapeError("align_dsm: grids have different geometry");
    std::vector<double> diffs;
    diffs.reserve(pred.alt.size());
    for (size_t i = 0; i < pred.alt.size(); ++i)
        if (std::isfinite(pred.alt[i]) && std::isfinite(gt.alt[i]))
            diffs.push_back(gt.alt[i] - pred.alt[i]);
    if (diffs.size() * 10 < pred.alt.size())
        throw Error("align_dsm: fewer than 10% co-valid cells");
    size_t mid = diffs.size() / 2;
    std::nth_element(diffs.begin(), diffs.begin() + long(mid), diffs.end());
    double med = diffs[mid];
    if (diffs.size() % 2 == 0) {
        std::nth_element(diffs.begin(), diffs.begin() + long(mid) - 1, diffs.end());
        med = (med + diffs[mid - 1]) / 2.0;
    }
    return med;
}

void add_offset(DsmGrid& g, double offset) {
    for (double& a : g.alt)
        if (std::isfinite(a)) a += offset;
}

namespace {
bool mask_passes(const Image* mask, int col, int row) {
    if (!mask) return true;
    return mask->at(col, row, 0) > 127;
}
}  // namespace

double mae(const DsmGrid& pred, const DsmGrid& gt, const Image* mask) {
    if (!pred.same_geometry(gt)) throw ShapeError("mae: grids have different geometry");
    if (mask && (mask->width != pred.width || mask->height != pred.height))
        throw ShapeError("mae: mask size does not match the grid");
    double acc = 0;
    int64_t n = 0;
    for (int row = 0; row < pred.height; ++row)
        for (int col = 0; col < pred.width; ++col) {
            if (!pred.valid(col, row) || !gt.valid(col, row)) continue;
            if (!mask_passes(mask, col, row)) continue;
            acc += std::abs(pred.at(col, row) - gt.at(col, row));
            n++;
        }
    if (n == 0) throw Error("mae: no co-valid cells");
    return acc / double(n);
}

double psnr(const FloatImage& img, const FloatImage& gt, const Image* mask) {
    if (img.width != gt.width || img.height != gt.height || img.channels != gt.channels)
        throw ShapeError("psnr: image sizes differ");
    if (mask && (mask->width != img.width || mask->height != img.height))
        throw ShapeError("psnr: mask size does not match the image");
    double acc = 0;
    int64_t n = 0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            if (!mask_passes(mask, x, y)) continue;
            for (int c = 0; c < img.channels; ++c) {
                double d = double(img.at(x, y, c)) - double(gt.at(x, y, c));
                acc += d * d;
                n++;
            }
        }
    if (n == 0) throw Error("psnr: empty mask");
    double mse = acc / double(n);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

double psnr(const Image& img, const Image& gt, const Image* mask) {
    return psnr(to_float01(img), to_float01(gt), mask);
}

std::string eval_report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["per_view"] = nlohmann::json::array();
    auto dbfield = [](double v) -> nlohmann::json {
        if (std::isinf(v)) return "+inf";
        return v;
    };
    for (const ViewReport& v : r.per_view)
        j["per_view"].push_back(
            {{"image_id", v.image_id}, {"mae_m", v.mae_m}, {"psnr_db", dbfield(v.psnr_db)}});
    j["mean_mae_m"] = r.mean_mae_m;
    j["mean_psnr_db"] = dbfield(r.mean_psnr_db);
    return j.dump(2);
}

void save_eval_report(const std::string& path, const EvalReport& r) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write eval report: " + path);
    out << eval_report_to_json(r) << "\n";
}

}  // namespace satgeo
