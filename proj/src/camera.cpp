#include "satgeo/camera.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace satgeo {

void SceneFrame::validate() const {
    if (!(scale > 0)) throw ConfigError("SceneFrame: scale must be positive");
    if (std::abs(gravity_up.norm() - 1.0) > 1e-9)
        throw ConfigError("SceneFrame: gravity_up must be a unit vector");
}

void SatCamera::validate() const {
    if (std::abs(view_dir.norm() - 1.0) > 1e-6)
        throw ConfigError("SatCamera " + std::to_string(image_id) + ": view_dir must be a unit vector");
    if (!(view_dir.z < 0))
        throw ConfigError("SatCamera " + std::to_string(image_id) + ": view_dir must look down (z < 0)");
    if (!(h_max > h_min))
        throw ConfigError("SatCamera " + std::to_string(image_id) + ": h_max must exceed h_min");
    if (width < 2 || height < 2)
        throw ConfigError("SatCamera " + std::to_string(image_id) + ": image must be at least 2x2");
    if (!(pixel_spacing > 0))
        throw ConfigError("SatCamera " + std::to_string(image_id) + ": pixel_spacing must be positive");
}

Ray make_ray(const SatCamera& cam, const SceneFrame& frame, int u, int v, const Vec2& q) {
    if (u < 0 || u >= cam.width || v < 0 || v >= cam.height)
        throw Error("make_ray: pixel (" + std::to_string(u) + ", " + std::to_string(v) +
                    ") outside image " + std::to_string(cam.width) + "x" + std::to_string(cam.height));
    if (q.norm() > 5.0 + 1e-9)
        throw Error("make_ray: |q| exceeds 5 pixel units");

    double px = (double(u) + q.x) * cam.pixel_spacing;
    double py = (double(v) + q.y) * cam.pixel_spacing;
    Vec3 start_utm(cam.ground_anchor.x + px, cam.ground_anchor.y + py, cam.h_max);
    double span = (cam.h_max - cam.h_min) / (-cam.view_dir.z);

    Ray r;
    r.origin = frame.to_normalized(start_utm);
    r.dir = cam.view_dir;  // parallel rays: identical direction for every pixel
    r.t_near = 0.0;
    r.t_far = span / frame.scale;
    r.u = u;
    r.v = v;
    r.image_id = cam.image_id;
    return r;
}

Vec2 reproject(const SatCamera& cam, const SceneFrame& frame, const Vec3& point_normalized) {
    Vec3 p = frame.to_utm(point_normalized);
    double s = (cam.h_max - p.z) / (-cam.view_dir.z);
    Vec3 at_hmax = p - cam.view_dir * s;
    return Vec2((at_hmax.x - cam.ground_anchor.x) / cam.pixel_spacing,
                (at_hmax.y - cam.ground_anchor.y) / cam.pixel_spacing);
}

AdjacentPixels sample_adjacent(int u, int v, int width, int height, Rng& rng) {
    if (width < 2 || height < 2) throw Error("sample_adjacent: image smaller than 2x2");
    if (u < 0 || u >= width || v < 0 || v >= height)
        throw Error("sample_adjacent: pixel out of bounds");
    int sx = rng.coin() ? 1 : -1;
    int sy = rng.coin() ? 1 : -1;
    if (u + sx < 0 || u + sx >= width) sx = -sx;
    if (v + sy < 0 || v + sy >= height) sy = -sy;
    AdjacentPixels a;
    a.u1 = u + sx;
    a.v1 = v;
    a.u2 = u;
    a.v2 = v + sy;
    a.sign_x = sx;
    a.sign_y = sy;
    return a;
}

PartialRay partial_ray(const Ray& ray, double center_depth, double p_n, int n_samples,
                       PartialRayMode mode) {
    if (!(p_n > 0.0) || p_n > 1.0) throw ConfigError("partial_ray: p_n must be in (0, 1]");
    if (center_depth < ray.t_near - 1e-12 || center_depth > ray.t_far + 1e-12)
        throw Error("partial_ray: center_depth outside [t_near, t_far]");

    double t_l = ray.t_far - ray.t_near;
    double t_n = t_l * p_n;
    double lo, hi;
    if (mode == PartialRayMode::kSymmetric) {
        lo = ray.t_near + (t_l - t_n) / 2.0;
        hi = ray.t_far - (t_l - t_n) / 2.0;
    } else {
        lo = center_depth - t_n / 2.0;
        hi = center_depth + t_n / 2.0;
        if (lo < ray.t_near) {
            hi += ray.t_near - lo;
            lo = ray.t_near;
        } else if (hi > ray.t_far) {
            lo -= hi - ray.t_far;
            hi = ray.t_far;
        }
    }

    PartialRay out;
    out.ray = ray;
    out.ray.t_near = lo;
    out.ray.t_far = hi;
    out.n_samples = std::max<int>(2, int(std::llround(double(n_samples) * p_n)));
    return out;
}

bool ray_inside_box(const Ray& ray, double tol) {
    auto check = [&](const Vec3& p) {
        return std::abs(p.x) <= 1.0 + tol && std::abs(p.y) <= 1.0 + tol && std::abs(p.z) <= 1.0 + tol;
    };
    return check(surface_point(ray, ray.t_near)) && check(surface_point(ray, ray.t_far));
}

namespace {
nlohmann::json vec3_json(const Vec3& v) { return nlohmann::json::array({v.x, v.y, v.z}); }
Vec3 vec3_from(const nlohmann::json& j) { return Vec3(j.at(0), j.at(1), j.at(2)); }
}  // namespace

std::string camera_to_json(const SatCamera& cam) {
    nlohmann::json j;
    j["image_id"] = cam.image_id;
    j["view_dir"] = vec3_json(cam.view_dir);
    j["pixel_spacing_m"] = cam.pixel_spacing;
    j["width"] = cam.width;
    j["height"] = cam.height;
    j["h_min_m"] = cam.h_min;
    j["h_max_m"] = cam.h_max;
    j["sun_dir"] = vec3_json(cam.sun_dir);
    j["ground_anchor_m"] = nlohmann::json::array({cam.ground_anchor.x, cam.ground_anchor.y});
    return j.dump(2);
}

SatCamera camera_from_json(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text);
    SatCamera cam;
    cam.image_id = j.at("image_id");
    cam.view_dir = vec3_from(j.at("view_dir"));
    cam.pixel_spacing = j.at("pixel_spacing_m");
    cam.width = j.at("width");
    cam.height = j.at("height");
    cam.h_min = j.at("h_min_m");
    cam.h_max = j.at("h_max_m");
    cam.sun_dir = vec3_from(j.at("sun_dir"));
    cam.ground_anchor = Vec2(j.at("ground_anchor_m").at(0), j.at("ground_anchor_m").at(1));
    cam.validate();
    return cam;
}

SatCamera load_camera(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open camera file: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return camera_from_json(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid camera file " + path + ": " + e.what());
    }
}

void save_camera(const SatCamera& cam, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write camera file: " + path);
    out << camera_to_json(cam) << "\n";
}

}  // namespace satgeo
