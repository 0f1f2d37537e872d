#include "satgeo/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "satgeo/field.hpp"

namespace fs = std::filesystem;

namespace satgeo {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

struct HalfSpace {
    Vec3 a;
    double b;  // a . p <= b
};

// Convex solid = intersection of halfspaces; all solids extend to z = -inf so
// the union is exactly { z < h(x, y) }.
struct Solid {
    std::vector<HalfSpace> hs;
};

Solid box_solid(const BoxSpec& b) {
    Solid s;
    s.hs.push_back({{1, 0, 0}, b.center.x + b.size.x / 2});
    s.hs.push_back({{-1, 0, 0}, -(b.center.x - b.size.x / 2)});
    s.hs.push_back({{0, 1, 0}, b.center.y + b.size.y / 2});
    s.hs.push_back({{0, -1, 0}, -(b.center.y - b.size.y / 2)});
    s.hs.push_back({{0, 0, 1}, b.height});
    return s;
}

Solid ramp_solid(const RampSpec& r) {
    Solid s;
    s.hs.push_back({{1, 0, 0}, r.hi.x});
    s.hs.push_back({{-1, 0, 0}, -r.lo.x});
    s.hs.push_back({{0, 1, 0}, r.hi.y});
    s.hs.push_back({{0, -1, 0}, -r.lo.y});
    if (r.axis == 0) {
        double k = (r.h_high - r.h_low) / (r.hi.x - r.lo.x);
        s.hs.push_back({{-k, 0, 1}, r.h_low - k * r.lo.x});
    } else {
        double k = (r.h_high - r.h_low) / (r.hi.y - r.lo.y);
        s.hs.push_back({{0, -k, 1}, r.h_low - k * r.lo.y});
    }
    return s;
}

// entry/exit of p(t) = s + t*d against the halfspace intersection, clipped
// to [t0, t1]; false when empty
bool clip_ray(const Solid& solid, const Vec3& s, const Vec3& d, double t0, double t1,
              double& enter, double& exit) {
    enter = t0;
    exit = t1;
    for (const HalfSpace& h : solid.hs) {
        double ad = h.a.dot(d);
        double ap = h.a.dot(s);
        if (std::abs(ad) < 1e-15) {
            if (ap > h.b) return false;
        } else if (ad > 0) {
            exit = std::min(exit, (h.b - ap) / ad);
        } else {
            enter = std::max(enter, (h.b - ap) / ad);
        }
        // a zero-length touch (enter == exit) still counts as a hit
        if (enter > exit) return false;
    }
    return true;
}

double ramp_height_at(const RampSpec& r, double x, double y) {
    if (x < r.lo.x || x > r.hi.x || y < r.lo.y || y > r.hi.y) return -kInf;
    double f = r.axis == 0 ? (x - r.lo.x) / (r.hi.x - r.lo.x) : (y - r.lo.y) / (r.hi.y - r.lo.y);
    return r.h_low + (r.h_high - r.h_low) * f;
}

// lattice value noise in [-1, 1], smoothstep-interpolated
double value_noise(double x, double y, uint64_t seed) {
    auto lattice = [seed](int64_t ix, int64_t iy) {
        uint64_t h = hash_stream(seed, uint64_t(ix) * 0x9E3779B1ull, uint64_t(iy));
        return double(h >> 11) * 0x1.0p-53 * 2.0 - 1.0;
    };
    double fx = std::floor(x), fy = std::floor(y);
    int64_t ix = int64_t(fx), iy = int64_t(fy);
    double tx = x - fx, ty = y - fy;
    tx = tx * tx * (3 - 2 * tx);
    ty = ty * ty * (3 - 2 * ty);
    double v00 = lattice(ix, iy), v10 = lattice(ix + 1, iy);
    double v01 = lattice(ix, iy + 1), v11 = lattice(ix + 1, iy + 1);
    return (v00 * (1 - tx) + v10 * tx) * (1 - ty) + (v01 * (1 - tx) + v11 * tx) * ty;
}

const std::array<std::array<double, 3>, 5> kBoxPalette = {{{0.70, 0.35, 0.30},
                                                           {0.35, 0.45, 0.65},
                                                           {0.62, 0.58, 0.35},
                                                           {0.45, 0.30, 0.55},
                                                           {0.30, 0.55, 0.50}}};
}  // namespace

void SceneSpec::validate() const {
    if (!(extent > 0)) throw ConfigError("SceneSpec.extent: must be positive");
    if (!(kappa > 0)) throw ConfigError("SceneSpec.kappa: must be positive");
    if (!(checker_period > 0)) throw ConfigError("SceneSpec.checker_period: must be positive");
    if (!(noise_period > 0)) throw ConfigError("SceneSpec.noise_period: must be positive");
    if (noise_amp < 0) throw ConfigError("SceneSpec.noise_amp: must be non-negative");
    if (ambient < 0 || ambient > 1) throw ConfigError("SceneSpec.ambient: must be in [0,1]");
    double half = extent / 2;
    for (size_t i = 0; i < boxes.size(); ++i) {
        const BoxSpec& b = boxes[i];
        if (!(b.size.x > 0) || !(b.size.y > 0))
            throw ConfigError("SceneSpec.boxes[" + std::to_string(i) + "].size: must be positive");
        if (!(b.height > ground_height))
            throw ConfigError("SceneSpec.boxes[" + std::to_string(i) +
                              "].height: must exceed ground_height");
        if (std::abs(b.center.x) + b.size.x / 2 > half || std::abs(b.center.y) + b.size.y / 2 > half)
            throw ConfigError("SceneSpec.boxes[" + std::to_string(i) +
                              "].center: footprint leaves the scene extent");
    }
    for (size_t i = 0; i < ramps.size(); ++i) {
        const RampSpec& r = ramps[i];
        if (!(r.hi.x > r.lo.x) || !(r.hi.y > r.lo.y))
            throw ConfigError("SceneSpec.ramps[" + std::to_string(i) + "].lo/hi: empty footprint");
        if (r.axis != 0 && r.axis != 1)
            throw ConfigError("SceneSpec.ramps[" + std::to_string(i) + "].axis: must be 0 or 1");
        if (std::max({std::abs(r.lo.x), std::abs(r.hi.x), std::abs(r.lo.y), std::abs(r.hi.y)}) > half)
            throw ConfigError("SceneSpec.ramps[" + std::to_string(i) +
                              "].footprint: leaves the scene extent");
    }
}

HeightfieldScene::HeightfieldScene(SceneSpec spec, SceneFrame frame, uint64_t seed)
    : spec_(std::move(spec)), frame_(frame), tex_seed_(hash_stream(seed, 0x7e97)) {
    spec_.validate();
    frame_.validate();
    if (std::abs(frame_.origin_utm.z) > 1e-9)
        throw ConfigError("HeightfieldScene: frame origin altitude must be zero");
}

HeightfieldScene gen_scene(const SceneSpec& spec, const SceneFrame& frame, uint64_t seed) {
    return HeightfieldScene(spec, frame, seed);
}

double HeightfieldScene::height(double x, double y) const {
    double h = spec_.ground_height;
    for (const BoxSpec& b : spec_.boxes) {
        if (std::abs(x - b.center.x) <= b.size.x / 2 && std::abs(y - b.center.y) <= b.size.y / 2)
            h = std::max(h, b.height);
    }
    for (const RampSpec& r : spec_.ramps) h = std::max(h, ramp_height_at(r, x, y));
    return h;
}

Vec3 HeightfieldScene::surface_normal(double x, double y) const {
    double h = spec_.ground_height;
    Vec3 n(0, 0, 1);
    for (const BoxSpec& b : spec_.boxes) {
        if (std::abs(x - b.center.x) <= b.size.x / 2 && std::abs(y - b.center.y) <= b.size.y / 2 &&
            b.height > h) {
            h = b.height;
            n = Vec3(0, 0, 1);
        }
    }
    for (const RampSpec& r : spec_.ramps) {
        double rh = ramp_height_at(r, x, y);
        if (rh > h) {
            h = rh;
            double k = r.axis == 0 ? (r.h_high - r.h_low) / (r.hi.x - r.lo.x)
                                   : (r.h_high - r.h_low) / (r.hi.y - r.lo.y);
            n = (r.axis == 0 ? Vec3(-k, 0, 1) : Vec3(0, -k, 1)).normalized();
        }
    }
    return n;
}

std::array<double, 3> HeightfieldScene::albedo(double x, double y) const {
    std::array<double, 3> base{0.42, 0.46, 0.40};  // ground
    double h = spec_.ground_height;
    for (size_t i = 0; i < spec_.boxes.size(); ++i) {
        const BoxSpec& b = spec_.boxes[i];
        if (std::abs(x - b.center.x) <= b.size.x / 2 && std::abs(y - b.center.y) <= b.size.y / 2 &&
            b.height > h) {
            h = b.height;
            base = kBoxPalette[i % kBoxPalette.size()];
        }
    }
    for (const RampSpec& r : spec_.ramps) {
        double rh = ramp_height_at(r, x, y);
        if (rh > h) {
            h = rh;
            base = {0.58, 0.50, 0.42};
        }
    }
    double cp = spec_.checker_period;
    long long cell = (long long)std::floor(x / cp) + (long long)std::floor(y / cp);
    double checker = (cell & 1LL) ? 0.86 : 1.10;
    double noise = spec_.noise_amp *
                   value_noise(x / spec_.noise_period, y / spec_.noise_period, tex_seed_);
    std::array<double, 3> out;
    for (int k = 0; k < 3; ++k)
        out[size_t(k)] = std::clamp(base[size_t(k)] * checker + noise, 0.02, 0.98);
    return out;
}

double HeightfieldScene::sigma_at(const Vec3& p_norm) const {
    Vec3 local = p_norm * frame_.scale;  // origin altitude is zero
    return local.z < height(local.x, local.y) ? spec_.kappa : 0.0;
}

std::vector<std::pair<double, double>> HeightfieldScene::occupancy(const Ray& ray) const {
    Vec3 s = ray.origin * frame_.scale;
    Vec3 d = ray.dir * frame_.scale;
    std::vector<std::pair<double, double>> segs;
    auto add = [&](const Solid& solid) {
        double a, b;
        if (clip_ray(solid, s, d, ray.t_near, ray.t_far, a, b)) segs.push_back({a, b});
    };
    Solid ground;
    ground.hs.push_back({{0, 0, 1}, spec_.ground_height});
    add(ground);
    for (const BoxSpec& b : spec_.boxes) add(box_solid(b));
    for (const RampSpec& r : spec_.ramps) add(ramp_solid(r));
    std::sort(segs.begin(), segs.end());
    std::vector<std::pair<double, double>> merged;
    for (const auto& seg : segs) {
        if (!merged.empty() && seg.first <= merged.back().second)
            merged.back().second = std::max(merged.back().second, seg.second);
        else
            merged.push_back(seg);
    }
    return merged;
}

double HeightfieldScene::surface_depth(const Ray& ray) const {
    auto segs = occupancy(ray);
    return segs.empty() ? kInf : segs.front().first;
}

double HeightfieldScene::continuous_volume_depth(const Ray& ray) const {
    double kappa = spec_.kappa;
    double occ = 0.0;  // occupied length before the segment
    double depth = 0.0;
    for (const auto& [a, b] : occupancy(ray)) {
        double h = b - a;
        double trans = std::exp(-kappa * occ);
        depth += trans * (a * (1.0 - std::exp(-kappa * h)) +
                          (1.0 / kappa) * (1.0 - std::exp(-kappa * h) * (1.0 + kappa * h)));
        occ += h;
    }
    return depth;
}

bool HeightfieldScene::sun_occluded(const Vec3& p_norm, const Vec3& sun_dir) const {
    if (!(sun_dir.z < 0)) throw DomainError("sun_occluded: sun_dir must point down");
    Ray up;
    up.dir = (sun_dir * -1.0).normalized();
    up.origin = p_norm + up.dir * 1e-6;
    up.t_near = 0;
    // enough to clear the highest structure
    up.t_far = 4.0;
    return !occupancy(up).empty();
}

DsmGrid HeightfieldScene::exact_dsm(double resolution) const {
    int n = int(std::llround(spec_.extent / resolution));
    if (n < 1) throw ConfigError("exact_dsm: resolution coarser than the scene");
    Vec2 origin(frame_.origin_utm.x - spec_.extent / 2, frame_.origin_utm.y - spec_.extent / 2);
    DsmGrid g = DsmGrid::make(origin, resolution, n, n);
    for (int row = 0; row < n; ++row)
        for (int col = 0; col < n; ++col) {
            double x = -spec_.extent / 2 + (col + 0.5) * resolution;
            double y = -spec_.extent / 2 + (row + 0.5) * resolution;
            g.at(col, row) = height(x, y);
        }
    return g;
}

// ---- dataset generation ----------------------------------------------------

void DatasetSpec::validate() const {
    scene.validate();
    if (n_images < 2) throw ConfigError("DatasetSpec.n_images: need at least 2 views");
    if (image_size < 2) throw ConfigError("DatasetSpec.image_size: must be at least 2");
    if (!(pixel_spacing > 0)) throw ConfigError("DatasetSpec.pixel_spacing: must be positive");
    if (!(h_max > h_min)) throw ConfigError("DatasetSpec.h_min/h_max: h_max must exceed h_min");
    if (h_min >= scene.ground_height)
        throw ConfigError("DatasetSpec.h_min: must lie below the ground so rays terminate");
    if (std::abs(off_nadir_min_deg) >= 60 || std::abs(off_nadir_max_deg) >= 60)
        throw ConfigError("DatasetSpec.off_nadir: angles must stay below 60 degrees");
    if (affine_jitter < 0 || affine_jitter > 0.5)
        throw ConfigError("DatasetSpec.affine_jitter: must be in [0, 0.5]");
    if (n_sparse_points < 1) throw ConfigError("DatasetSpec.n_sparse_points: must be >= 1");
    if (pixel_noise_px < 0) throw ConfigError("DatasetSpec.pixel_noise_px: must be >= 0");
    if (!(dsm_resolution > 0)) throw ConfigError("DatasetSpec.dsm_resolution: must be positive");
}

DatasetSpec toy_jax_preset(uint64_t seed) {
    DatasetSpec d;
    d.scene.extent = 64;
    d.scene.boxes.push_back({{-10, -8}, {16, 12}, 8});
    d.scene.boxes.push_back({{12, 10}, {14, 14}, 12});
    d.scene.ramps.push_back({{2, -14}, {14, -6}, 0.0, 6.0, 0});
    d.seed = seed;
    return d;
}

namespace {

std::vector<SatCamera> build_cameras(const DatasetSpec& spec, const Vec3& origin_utm) {
    std::vector<SatCamera> cams;
    for (int k = 0; k < spec.n_images; ++k) {
        double frac = spec.n_images == 1 ? 0.5 : double(k) / (spec.n_images - 1);
        double theta = (spec.off_nadir_min_deg +
                        frac * (spec.off_nadir_max_deg - spec.off_nadir_min_deg)) *
                       M_PI / 180.0;
        double phi = (40.0 * k + 15.0) * M_PI / 180.0;
        SatCamera cam;
        cam.image_id = k;
        cam.view_dir = Vec3(std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi),
                            -std::cos(theta))
                           .normalized();
        cam.pixel_spacing = spec.pixel_spacing;
        cam.width = cam.height = spec.image_size;
        cam.h_min = spec.h_min;
        cam.h_max = spec.h_max;
        uint64_t h = hash_stream(spec.seed, 0x5c1, uint64_t(k));
        Rng sun_rng(h);
        cam.sun_dir =
            Vec3(0.35 + sun_rng.uniform(-0.05, 0.05), 0.25 + sun_rng.uniform(-0.05, 0.05), -0.9)
                .normalized();
        // center pixel's ground intersection lands on the scene center
        double w2 = (spec.image_size - 1) / 2.0 * spec.pixel_spacing;
        double t_ground = (spec.h_max - spec.scene.ground_height) / (-cam.view_dir.z);
        cam.ground_anchor = Vec2(origin_utm.x - w2 - t_ground * cam.view_dir.x,
                                 origin_utm.y - w2 - t_ground * cam.view_dir.y);
        cams.push_back(cam);
    }
    return cams;
}

double required_scale(const DatasetSpec& spec, const std::vector<SatCamera>& cams,
                      const Vec3& origin_utm) {
    double m = std::max(std::abs(spec.h_max), std::abs(spec.h_min));
    for (const SatCamera& cam : cams) {
        double span = (cam.h_max - cam.h_min) / (-cam.view_dir.z);
        for (int cu : {0, cam.width - 1})
            for (int cv : {0, cam.height - 1}) {
                // corner pixel with the full q margin of 5 px
                for (double qs : {-5.0, 5.0}) {
                    double px = (cu + qs) * cam.pixel_spacing;
                    double py = (cv + qs) * cam.pixel_spacing;
                    Vec3 start(cam.ground_anchor.x + px - origin_utm.x,
                               cam.ground_anchor.y + py - origin_utm.y, cam.h_max);
                    Vec3 end = start + cam.view_dir * span;
                    for (const Vec3& p : {start, end})
                        m = std::max({m, std::abs(p.x), std::abs(p.y), std::abs(p.z)});
                }
            }
    }
    return 1.05 * m;
}

std::vector<PerImageColor> draw_gt_colors(const DatasetSpec& spec) {
    std::vector<PerImageColor> out;
    Rng rng(hash_stream(spec.seed, 0xc010));
    for (int k = 0; k < spec.n_images; ++k) {
        PerImageColor c;
        for (int ch = 0; ch < 3; ++ch) {
            c.A[size_t(4 * ch)] = real(1.0 + rng.uniform(-spec.affine_jitter, spec.affine_jitter));
            c.b[size_t(ch)] = real(rng.uniform(-0.02, 0.02));
        }
        out.push_back(c);
    }
    return out;
}

std::string pad3(int k) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "%03d", k);
    return buf;
}

}  // namespace

GroundTruthView render_ground_truth(const HeightfieldScene& scene, const SatCamera& cam,
                                    const PerImageColor& color, bool shadows) {
    GroundTruthView out;
    FloatImage rgb = FloatImage::make(cam.width, cam.height, 3);
    out.depth = FloatImage::make(cam.width, cam.height, 1);
    const SceneFrame& frame = scene.frame();
    for (int v = 0; v < cam.height; ++v)
        for (int u = 0; u < cam.width; ++u) {
            Ray ray = make_ray(cam, frame, u, v);
            double t = scene.surface_depth(ray);
            if (!std::isfinite(t))
                throw NumericError("render_ground_truth: ray misses the scene at pixel (" +
                                   std::to_string(u) + ", " + std::to_string(v) + ")");
            out.depth.at(u, v) = float(t);
            Vec3 hit = surface_point(ray, t);
            Vec3 local = hit * frame.scale;
            auto alb = scene.albedo(local.x, local.y);
            FieldOutput fo;
            for (int k = 0; k < 3; ++k) {
                fo.albedo[size_t(k)] = real(alb[size_t(k)]);
                fo.ambient[size_t(k)] = real(scene.spec().ambient);
            }
            real s = 1;
            if (shadows && scene.sun_occluded(hit + Vec3(0, 0, 1e-6), cam.sun_dir)) s = 0;
            auto c = compose_color(fo, color.A, color.b, s);
            for (int k = 0; k < 3; ++k) rgb.at(u, v, k) = float(c[size_t(k)]);
        }
    out.image = quantize8(rgb);
    return out;
}

std::vector<SparsePointRecord> sample_sparse_points(const HeightfieldScene& scene,
                                                    const std::vector<SatCamera>& cams, int n,
                                                    double pixel_noise_px, uint64_t seed) {
    if (n < 1) throw ConfigError("sample_sparse_points: n must be >= 1");
    Rng rng(hash_stream(seed, 0x9013));
    std::vector<SparsePointRecord> recs;
    recs.reserve(size_t(n));
    const SceneFrame& frame = scene.frame();
    while (int(recs.size()) < n) {
        const SatCamera& cam = cams[size_t(rng.uniform_int(int64_t(cams.size())))];
        int u = int(rng.uniform_int(cam.width));
        int v = int(rng.uniform_int(cam.height));
        Ray ray = make_ray(cam, frame, u, v);
        double t = scene.surface_depth(ray);
        if (!std::isfinite(t)) continue;
        Vec3 hit = frame.to_utm(surface_point(ray, t));
        double h = scene.height(hit.x - frame.origin_utm.x, hit.y - frame.origin_utm.y);
        // wall hits of oblique rays have z < h(x, y); keep top-surface points
        // only so every point satisfies z = h(x, y)
        if (std::abs(hit.z - h) > 1e-6) continue;
        hit.z = h;
        SparsePointRecord r;
        r.image_id = cam.image_id;
        r.u = u;
        r.v = v;
        r.xyz_utm = hit;
        r.reproj_err_px = std::abs(rng.normal(0.0, pixel_noise_px));
        recs.push_back(r);
    }
    return recs;
}

std::string dataset_spec_to_json(const DatasetSpec& d) {
    nlohmann::json j;
    nlohmann::json sc;
    sc["extent_m"] = d.scene.extent;
    sc["ground_height_m"] = d.scene.ground_height;
    sc["kappa"] = d.scene.kappa;
    sc["checker_period_m"] = d.scene.checker_period;
    sc["noise_amp"] = d.scene.noise_amp;
    sc["noise_period_m"] = d.scene.noise_period;
    sc["ambient"] = d.scene.ambient;
    sc["boxes"] = nlohmann::json::array();
    for (const BoxSpec& b : d.scene.boxes)
        sc["boxes"].push_back({{"center_m", {b.center.x, b.center.y}},
                               {"size_m", {b.size.x, b.size.y}},
                               {"height_m", b.height}});
    sc["ramps"] = nlohmann::json::array();
    for (const RampSpec& r : d.scene.ramps)
        sc["ramps"].push_back({{"lo_m", {r.lo.x, r.lo.y}},
                               {"hi_m", {r.hi.x, r.hi.y}},
                               {"h_low_m", r.h_low},
                               {"h_high_m", r.h_high},
                               {"axis", r.axis}});
    j["scene"] = sc;
    j["n_images"] = d.n_images;
    j["image_size"] = d.image_size;
    j["pixel_spacing_m"] = d.pixel_spacing;
    j["off_nadir_min_deg"] = d.off_nadir_min_deg;
    j["off_nadir_max_deg"] = d.off_nadir_max_deg;
    j["h_min_m"] = d.h_min;
    j["h_max_m"] = d.h_max;
    j["affine_jitter"] = d.affine_jitter;
    j["shadows"] = d.shadows;
    j["n_sparse_points"] = d.n_sparse_points;
    j["pixel_noise_px"] = d.pixel_noise_px;
    j["dsm_resolution_m"] = d.dsm_resolution;
    j["seed"] = d.seed;
    return j.dump(2);
}

DatasetSpec dataset_spec_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, true, true);
    DatasetSpec d;
    const nlohmann::json& sc = j.at("scene");
    d.scene.extent = sc.at("extent_m");
    d.scene.ground_height = sc.value("ground_height_m", 0.0);
    d.scene.kappa = sc.value("kappa", 200.0);
    d.scene.checker_period = sc.value("checker_period_m", 4.0);
    d.scene.noise_amp = sc.value("noise_amp", 0.08);
    d.scene.noise_period = sc.value("noise_period_m", 8.0);
    d.scene.ambient = sc.value("ambient", 0.35);
    for (const auto& b : sc.value("boxes", nlohmann::json::array())) {
        BoxSpec bs;
        bs.center = Vec2(b.at("center_m").at(0), b.at("center_m").at(1));
        bs.size = Vec2(b.at("size_m").at(0), b.at("size_m").at(1));
        bs.height = b.at("height_m");
        d.scene.boxes.push_back(bs);
    }
    for (const auto& r : sc.value("ramps", nlohmann::json::array())) {
        RampSpec rs;
        rs.lo = Vec2(r.at("lo_m").at(0), r.at("lo_m").at(1));
        rs.hi = Vec2(r.at("hi_m").at(0), r.at("hi_m").at(1));
        rs.h_low = r.at("h_low_m");
        rs.h_high = r.at("h_high_m");
        rs.axis = r.value("axis", 0);
        d.scene.ramps.push_back(rs);
    }
    d.n_images = j.value("n_images", 9);
    d.image_size = j.value("image_size", 64);
    d.pixel_spacing = j.value("pixel_spacing_m", 1.0);
    d.off_nadir_min_deg = j.value("off_nadir_min_deg", -20.0);
    d.off_nadir_max_deg = j.value("off_nadir_max_deg", 20.0);
    d.h_min = j.value("h_min_m", -2.0);
    d.h_max = j.value("h_max_m", 30.0);
    d.affine_jitter = j.value("affine_jitter", 0.10);
    d.shadows = j.value("shadows", false);
    d.n_sparse_points = j.value("n_sparse_points", 512);
    d.pixel_noise_px = j.value("pixel_noise_px", 1.0);
    d.dsm_resolution = j.value("dsm_resolution_m", 1.0);
    d.seed = j.value("seed", uint64_t(1));
    d.validate();
    return d;
}

void generate_dataset(const DatasetSpec& spec, const std::string& out_dir, bool force) {
    spec.validate();
    fs::path out(out_dir);
    if (fs::exists(out) && !fs::is_empty(out) && !force)
        throw ConfigError("output directory not empty (use --force): " + out_dir);
    fs::create_directories(out / "cameras");
    fs::create_directories(out / "images");
    fs::create_directories(out / "depth_gt");

    Vec3 origin_utm(1000, 2000, 0);
    std::vector<SatCamera> cams = build_cameras(spec, origin_utm);
    SceneFrame frame;
    frame.origin_utm = origin_utm;
    frame.scale = required_scale(spec, cams, origin_utm);
    HeightfieldScene scene(spec.scene, frame, spec.seed);

    for (const SatCamera& cam : cams) {
        cam.validate();
        for (int cu : {0, cam.width - 1})
            for (int cv : {0, cam.height - 1})
                if (!ray_inside_box(make_ray(cam, frame, cu, cv)))
                    throw NumericError("generate_dataset: corner ray leaves the scene box");
    }

    std::vector<PerImageColor> colors = draw_gt_colors(spec);
    nlohmann::json gtc = nlohmann::json::array();
    for (int k = 0; k < spec.n_images; ++k) {
        const SatCamera& cam = cams[size_t(k)];
        save_camera(cam, (out / "cameras" / ("cam_" + pad3(k) + ".json")).string());
        GroundTruthView view = render_ground_truth(scene, cam, colors[size_t(k)], spec.shadows);
        save_png((out / "images" / ("img_" + pad3(k) + ".png")).string(), view.image);
        save_pfm((out / "depth_gt" / ("depth_" + pad3(k) + ".pfm")).string(), view.depth);
        gtc.push_back({{"A", std::vector<double>(colors[size_t(k)].A.begin(), colors[size_t(k)].A.end())},
                       {"b", std::vector<double>(colors[size_t(k)].b.begin(), colors[size_t(k)].b.end())}});
    }

    save_dsm((out / "dsm_gt").string(), scene.exact_dsm(spec.dsm_resolution));
    save_sparse_points_csv((out / "sparse_points.csv").string(),
                           sample_sparse_points(scene, cams, spec.n_sparse_points,
                                                spec.pixel_noise_px, spec.seed));

    nlohmann::json sj;
    sj["frame"] = {{"origin_utm", {frame.origin_utm.x, frame.origin_utm.y, frame.origin_utm.z}},
                   {"scale_m", frame.scale}};
    sj["dataset_spec"] = nlohmann::json::parse(dataset_spec_to_json(spec));
    sj["gt_color"] = gtc;
    std::ofstream sf(out / "scene.json");
    if (!sf) throw IoError("cannot write scene.json in " + out_dir);
    sf << sj.dump(2) << "\n";
}

}  // namespace satgeo
