#pragma once

#include <string>
#include <vector>

#include "satgeo/common.hpp"

namespace satgeo {

// Gravity-aligned planar scene frame. World coordinates are UTM-like meters;
// the normalized frame maps them into [-1,1]^3 with one isotropic scale so
// normals are not distorted.
struct SceneFrame {
    Vec3 origin_utm{0, 0, 0};
    double scale = 1.0;  // meters per normalized unit, identical on all axes
    Vec3 gravity_up{0, 0, 1};

    Vec3 to_normalized(const Vec3& utm) const { return (utm - origin_utm) / scale; }
    Vec3 to_utm(const Vec3& n) const { return origin_utm + n * scale; }
    void validate() const;
};

// Simplified satellite camera: all rays of one image are parallel along
// view_dir, anchored on the h_max plane. Pixel (0,0) maps to ground_anchor
// at height h_max.
struct SatCamera {
    int image_id = 0;
    Vec3 view_dir{0, 0, -1};  // unit, z < 0
    double pixel_spacing = 1.0;  // meters per pixel
    int width = 0, height = 0;
    double h_min = 0.0, h_max = 0.0;  // meters, scene height bounds
    Vec3 sun_dir{0, 0, -1};
    Vec2 ground_anchor{0, 0};  // meters, pixel (0,0) at height h_max

    void validate() const;
};

struct Ray {
    Vec3 origin;  // normalized scene units
    Vec3 dir;     // unit
    double t_near = 0.0, t_far = 0.0;
    int u = 0, v = 0;
    int image_id = 0;
};

// Projects (pixel + q) at h_max and h_min through the camera and converts to
// the normalized frame. q is the learned per-image pixel adjustment, in
// pixel units, |q| <= 5.
Ray make_ray(const SatCamera& cam, const SceneFrame& frame, int u, int v, const Vec2& q = {0, 0});

inline Vec3 surface_point(const Ray& ray, double depth) { return ray.origin + ray.dir * depth; }

// Continuous pixel coordinates of a normalized-frame point seen by `cam`.
Vec2 reproject(const SatCamera& cam, const SceneFrame& frame, const Vec3& point_normalized);

// Neighbor pixels for explicit-normal patches: one neighbor on the X axis,
// one on the Y axis, signs in {-1,+1}. Border pixels take the only
// in-bounds side.
struct AdjacentPixels {
    int u1 = 0, v1 = 0;  // x-neighbor
    int u2 = 0, v2 = 0;  // y-neighbor
    int sign_x = 1, sign_y = 1;
};
AdjacentPixels sample_adjacent(int u, int v, int width, int height, Rng& rng);

enum class PartialRayMode { kCentered, kSymmetric };

struct PartialRay {
    Ray ray;
    int n_samples = 0;
};

// Shrinks [t_near, t_far] to length (t_far-t_near)*p_n and reduces the sample
// count to round(N*p_n) so sample spacing is preserved. Centered mode places
// the interval around center_depth (shifted minimally to stay inside);
// symmetric mode shrinks about the original midpoint.
PartialRay partial_ray(const Ray& ray, double center_depth, double p_n, int n_samples,
                       PartialRayMode mode = PartialRayMode::kCentered);

// True when origin + t*dir stays in [-1,1]^3 for t in [t_near, t_far].
bool ray_inside_box(const Ray& ray, double tol = 1e-6);

// Camera file round-trip (JSON, one object per image).
std::string camera_to_json(const SatCamera& cam);
SatCamera camera_from_json(const std::string& json_text);
SatCamera load_camera(const std::string& path);
void save_camera(const SatCamera& cam, const std::string& path);

}  // namespace satgeo
