#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "satgeo/camera.hpp"
#include "satgeo/dsm.hpp"
#include "satgeo/image_io.hpp"
#include "satgeo/regularizers.hpp"

namespace satgeo {

// Primitives live in scene-local meters (frame origin at xy = (0,0), z =
// altitude). Overlaps resolve by max height.
struct BoxSpec {
    Vec2 center;
    Vec2 size;
    double height = 0;  // top altitude
};

struct RampSpec {
    Vec2 lo, hi;  // footprint corners
    double h_low = 0, h_high = 0;
    int axis = 0;  // rises along x (0) or y (1)
};

struct SceneSpec {
    double extent = 64;  // footprint [-extent/2, extent/2]^2
    double ground_height = 0;
    std::vector<BoxSpec> boxes;
    std::vector<RampSpec> ramps;
    double kappa = 200;  // opaque-solid density, normalized units
    double checker_period = 4.0;
    double noise_amp = 0.08;
    double noise_period = 8.0;
    double ambient = 0.35;  // ground-truth ambient when shading is on
    void validate() const;  // names the offending field
};

// Piecewise-analytic urban heightfield with exact intersections; the test
// oracle for rendering, regularizers and evaluation.
class HeightfieldScene {
  public:
    HeightfieldScene(SceneSpec spec, SceneFrame frame, uint64_t seed);

    const SceneSpec& spec() const { return spec_; }
    const SceneFrame& frame() const { return frame_; }

    double height(double x, double y) const;  // local meters
    Vec3 surface_normal(double x, double y) const;
    std::array<double, 3> albedo(double x, double y) const;

    // kappa * indicator(z < h(x, y)); p in normalized frame units
    double sigma_at(const Vec3& p_norm) const;

    // exact first entry into the solid union; +inf when the ray misses
    double surface_depth(const Ray& ray) const;
    // merged occupied [t0, t1] intervals along the ray
    std::vector<std::pair<double, double>> occupancy(const Ray& ray) const;
    // closed-form continuous volume-rendering depth of the step profile
    double continuous_volume_depth(const Ray& ray) const;

    bool sun_occluded(const Vec3& p_norm, const Vec3& sun_dir) const;

    DsmGrid exact_dsm(double resolution) const;  // nadir, cell centers

  private:
    SceneSpec spec_;
    SceneFrame frame_;
    uint64_t tex_seed_;
};

// Deterministic factory (overlaps resolve by max; exposes exact h, normals,
// nadir DSM through the returned scene).
HeightfieldScene gen_scene(const SceneSpec& spec, const SceneFrame& frame, uint64_t seed);

// ---- dataset generation ---------------------------------------------------

struct PerImageColor {
    std::array<real, 9> A{1, 0, 0, 0, 1, 0, 0, 0, 1};
    std::array<real, 3> b{0, 0, 0};
};

struct DatasetSpec {
    SceneSpec scene;
    int n_images = 9;
    int image_size = 64;
    double pixel_spacing = 1.0;
    double off_nadir_min_deg = -20.0, off_nadir_max_deg = 20.0;
    double h_min = -2.0, h_max = 30.0;
    double affine_jitter = 0.10;  // +-10% per-image color scale
    bool shadows = false;
    int n_sparse_points = 512;
    double pixel_noise_px = 1.0;
    double dsm_resolution = 1.0;  // matched to the toy pixel spacing
    uint64_t seed = 1;
    void validate() const;
};

// Benchmark preset: 64 m extent, flat ground, two roof boxes, one ramp,
// nine cameras spanning -20..20 degrees off-nadir, per-image color jitter.
DatasetSpec toy_jax_preset(uint64_t seed = 1);

struct GroundTruthView {
    Image image;
    FloatImage depth;  // ray parameter t, normalized units
};
GroundTruthView render_ground_truth(const HeightfieldScene& scene, const SatCamera& cam,
                                    const PerImageColor& color, bool shadows);

// Points sampled exactly on the surface; the reprojection-error field is a
// simulated |N(0, noise)| draw feeding the weight rule.
std::vector<SparsePointRecord> sample_sparse_points(const HeightfieldScene& scene,
                                                    const std::vector<SatCamera>& cams, int n,
                                                    double pixel_noise_px, uint64_t seed);

// Directory layout: scene.json, cameras/*.json, images/*.png,
// depth_gt/*.pfm, dsm_gt.pfm + dsm_gt.json, sparse_points.csv.
void generate_dataset(const DatasetSpec& spec, const std::string& out_dir, bool force = false);

std::string dataset_spec_to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const std::string& json_text);

}  // namespace satgeo
