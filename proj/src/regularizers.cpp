#include "satgeo/regularizers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace satgeo {

NormalResult explicit_normal(const Vec3& p, const Vec3& p1, const Vec3& p2, int s_x, int s_y) {
    Vec3 cr = (p1 - p).cross(p2 - p);
    double n = cr.norm();
    NormalResult out;
    if (n < kDegenerateNormalEps) {
        out.degenerate = true;
        return out;
    }
    out.n = cr * (double(s_x * s_y) / n);
    return out;
}

NormalBatch explicit_normal_batch(const Tensor& p, const Tensor& p1, const Tensor& p2,
                                  const std::vector<real>& sign_prod) {
    if (p.ndim() != 2 || p.shape()[1] != 3 || p.shape() != p1.shape() || p.shape() != p2.shape())
        throw ShapeError("explicit_normal_batch: expected matching [R,3] points");
    int64_t R = p.shape()[0];
    if (int64_t(sign_prod.size()) != R)
        throw ShapeError("explicit_normal_batch: sign count does not match rows");

    Tensor cr = cross(sub(p1, p), sub(p2, p));
    NormalBatch out;
    out.total_rows = R;
    for (int64_t r = 0; r < R; ++r) {
        double nx = double(cr[r * 3]);
        double ny = double(cr[r * 3 + 1]);
        double nz = double(cr[r * 3 + 2]);
        if (std::sqrt(nx * nx + ny * ny + nz * nz) >= kDegenerateNormalEps) out.rows.push_back(r);
    }
    if (out.rows.empty()) {
        out.n = Tensor::zeros({0, 3});
        return out;
    }
    Tensor valid = gather_rows(cr, out.rows);
    Tensor unit = div(valid, norm(valid, -1, true));
    std::vector<real> s;
    s.reserve(out.rows.size());
    for (int64_t r : out.rows) s.push_back(sign_prod[size_t(r)]);
    out.n = mul(unit, Tensor::from({int64_t(out.rows.size()), 1}, std::move(s)));
    return out;
}

Tensor planarity_loss(const NormalBatch& patches, const Vec3& g) {
    if (patches.rows.empty()) return Tensor::scalar(0);
    Tensor gt = Tensor::from({3}, std::vector<double>{g.x, g.y, g.z});
    return mean(norm(sub(gt, patches.n), -1, false));
}

double reproj_weight(double err_px) {
    if (err_px < 0) throw DomainError("reproj_weight: negative reprojection error");
    return std::clamp(1.0 / (1.0 + err_px), 0.1, 1.0);
}

DepthSupervision depth_supervised_loss(const Tensor& pred_depth,
                                       const std::vector<double>& target_dist,
                                       const std::vector<double>& weights,
                                       const std::vector<std::pair<double, double>>& spans) {
    int64_t P = pred_depth.size();
    if (int64_t(target_dist.size()) != P || int64_t(weights.size()) != P ||
        int64_t(spans.size()) != P)
        throw ShapeError("depth_supervised_loss: per-point arrays must match prediction count");

    std::vector<int64_t> used_rows;
    std::vector<real> dist, w;
    for (int64_t i = 0; i < P; ++i) {
        if (!(weights[size_t(i)] > 0))
            throw DomainError("depth_supervised_loss: weights must be positive");
        if (target_dist[size_t(i)] < spans[size_t(i)].first ||
            target_dist[size_t(i)] > spans[size_t(i)].second)
            continue;
        used_rows.push_back(i);
        dist.push_back(real(target_dist[size_t(i)]));
        w.push_back(real(weights[size_t(i)]));
    }

    DepthSupervision out;
    out.used = int(used_rows.size());
    out.skipped = int(P - int64_t(used_rows.size()));
    if (used_rows.empty()) {
        out.loss = Tensor::scalar(0);
        return out;
    }
    Tensor pred = reshape(gather_rows(reshape(pred_depth, {P, 1}), used_rows),
                          {int64_t(used_rows.size())});
    Tensor err = sub(pred, Tensor::from({int64_t(used_rows.size())}, std::move(dist)));
    Tensor wt = Tensor::from({int64_t(used_rows.size())}, std::move(w));
    out.loss = mean(mul(wt, mul(err, err)));
    return out;
}

void save_sparse_points_csv(const std::string& path, const std::vector<SparsePointRecord>& recs) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write sparse points: " + path);
    out << "image_id,u,v,x,y,z,reproj_err_px\n";
    out.precision(17);
    for (const auto& r : recs)
        out << r.image_id << "," << r.u << "," << r.v << "," << r.xyz_utm.x << "," << r.xyz_utm.y
            << "," << r.xyz_utm.z << "," << r.reproj_err_px << "\n";
}

std::vector<SparsePointRecord> read_sparse_point_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open sparse points: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("sparse points file is empty: " + path);
    if (line != "image_id,u,v,x,y,z,reproj_err_px")
        throw ConfigError("sparse points file " + path + ": unexpected header '" + line + "'");
    std::vector<SparsePointRecord> recs;
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        SparsePointRecord r;
        char c;
        if (!(ss >> r.image_id >> c >> r.u >> c >> r.v >> c >> r.xyz_utm.x >> c >> r.xyz_utm.y >>
              c >> r.xyz_utm.z >> c >> r.reproj_err_px))
            throw ConfigError("sparse points file " + path + ": bad row at line " +
                              std::to_string(lineno));
        recs.push_back(r);
    }
    return recs;
}

std::vector<SparseDepthPoint> load_sparse_points_csv(const std::string& path,
                                                     const SceneFrame& frame) {
    std::vector<SparseDepthPoint> pts;
    for (const auto& r : read_sparse_point_records(path)) {
        SparseDepthPoint p;
        p.x = frame.to_normalized(r.xyz_utm);
        p.image_id = r.image_id;
        p.u = r.u;
        p.v = r.v;
        p.weight = reproj_weight(r.reproj_err_px);
        pts.push_back(p);
    }
    return pts;
}

void ScheduleConfig::validate() const {
    if (total_iterations < 1) throw ConfigError("ScheduleConfig: total_iterations must be >= 1");
    if (iters_per_epoch < 1) throw ConfigError("ScheduleConfig: iters_per_epoch must be >= 1");
    if (ds_fraction < 0 || ds_fraction > 1)
        throw ConfigError("ScheduleConfig: ds_fraction must be in [0,1]");
    if (granularity_T < 1) throw ConfigError("ScheduleConfig: granularity_T must be >= 1");
    if (lambda_planar < 0 || lambda_ds < 0)
        throw ConfigError("ScheduleConfig: loss weights must be non-negative");
}

ScheduleState loss_schedule(int64_t iter, int epoch, const ScheduleConfig& cfg) {
    cfg.validate();
    if (iter < 0 || epoch < 1) throw Error("loss_schedule: iter must be >= 0 and epoch >= 1");
    ScheduleState s;
    s.uncertainty_mode = epoch >= cfg.uncertainty_start_epoch;
    s.lambda_planar =
        (cfg.enable_planarity && epoch >= cfg.planarity_start_epoch) ? cfg.lambda_planar : 0.0;
    bool ds_active = double(iter) < cfg.ds_fraction * double(cfg.total_iterations);
    s.lambda_ds = (cfg.enable_ds && ds_active) ? cfg.lambda_ds : 0.0;
    s.mask_iter = cfg.enable_granularity ? iter : cfg.granularity_T;
    return s;
}

}  // namespace satgeo
