#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "satgeo/dataset.hpp"
#include "satgeo/rendering.hpp"
#include "satgeo/scenegen.hpp"

using namespace satgeo;
namespace fs = std::filesystem;

namespace {

SceneFrame test_frame(double scale = 100.0) {
    SceneFrame f;
    f.origin_utm = Vec3(0, 0, 0);
    f.scale = scale;
    return f;
}

SatCamera nadir_cam(double h_max = 100, double h_min = 0, int size = 32) {
    SatCamera cam;
    cam.view_dir = Vec3(0, 0, -1);
    cam.pixel_spacing = 1.0;
    cam.width = cam.height = size;
    cam.h_min = h_min;
    cam.h_max = h_max;
    cam.ground_anchor = Vec2(-size / 2.0, -size / 2.0);
    return cam;
}

}  // namespace

TEST_CASE("gen_scene: empty spec is flat ground") {
    SceneSpec spec;
    HeightfieldScene scene = gen_scene(spec, test_frame(), 1);
    Rng rng(2);
    for (int i = 0; i < 50; ++i)
        CHECK(scene.height(rng.uniform(-30, 30), rng.uniform(-30, 30)) == 0.0);
}

TEST_CASE("gen_scene: single box DSM is its height inside the footprint") {
    SceneSpec spec;
    spec.boxes.push_back({{0, 0}, {10, 10}, 5});
    HeightfieldScene scene = gen_scene(spec, test_frame(), 1);
    CHECK(scene.height(0, 0) == 5.0);
    CHECK(scene.height(4.9, -4.9) == 5.0);
    CHECK(scene.height(5.1, 0) == 0.0);
    DsmGrid dsm = scene.exact_dsm(1.0);
    int inside = 0;
    for (int r = 0; r < dsm.height; ++r)
        for (int c = 0; c < dsm.width; ++c) {
            double x = -32 + (c + 0.5), y = -32 + (r + 0.5);
            double want = (std::abs(x) <= 5 && std::abs(y) <= 5) ? 5.0 : 0.0;
            CHECK(dsm.at(c, r) == want);
            inside += dsm.at(c, r) == 5.0;
        }
    CHECK(inside == 100);
}

TEST_CASE("gen_scene: random specs match a brute-force per-primitive max") {
    Rng rng(77);
    for (int trial = 0; trial < 10; ++trial) {
        SceneSpec spec;
        int nb = 1 + int(rng.uniform_int(4));
        for (int i = 0; i < nb; ++i)
            spec.boxes.push_back({{rng.uniform(-20, 20), rng.uniform(-20, 20)},
                                  {rng.uniform(2, 10), rng.uniform(2, 10)},
                                  rng.uniform(1, 15)});
        spec.ramps.push_back({{-20, -20}, {-10, -12}, 0.0, rng.uniform(2, 8), int(rng.uniform_int(2))});
        HeightfieldScene scene = gen_scene(spec, test_frame(), 1);
        for (int probe = 0; probe < 100; ++probe) {
            double x = rng.uniform(-31, 31), y = rng.uniform(-31, 31);
            double want = 0;
            for (const BoxSpec& b : spec.boxes)
                if (std::abs(x - b.center.x) <= b.size.x / 2 && std::abs(y - b.center.y) <= b.size.y / 2)
                    want = std::max(want, b.height);
            const RampSpec& r = spec.ramps[0];
            if (x >= r.lo.x && x <= r.hi.x && y >= r.lo.y && y <= r.hi.y) {
                double f = r.axis == 0 ? (x - r.lo.x) / (r.hi.x - r.lo.x)
                                       : (y - r.lo.y) / (r.hi.y - r.lo.y);
                want = std::max(want, r.h_low + (r.h_high - r.h_low) * f);
            }
            CHECK(scene.height(x, y) == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("scene spec validation names the offending field") {
    SceneSpec spec;
    spec.boxes.push_back({{100, 0}, {10, 10}, 5});
    try {
        spec.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("boxes[0]") != std::string::npos);
    }
}

TEST_CASE("surface_depth: nadir flat ground and analytic oblique discontinuity") {
    SceneSpec spec;
    HeightfieldScene flat = gen_scene(spec, test_frame(100), 1);
    SatCamera cam = nadir_cam(100, 0);
    for (int u = 0; u < cam.width; u += 7)
        for (int v = 0; v < cam.height; v += 7) {
            Ray r = make_ray(cam, flat.frame(), u, v);
            CHECK(flat.surface_depth(r) == doctest::Approx(1.0).epsilon(1e-12));
        }

    // oblique view across a box edge: depth jumps by h/(cos(theta)*scale)
    SceneSpec box_spec;
    box_spec.boxes.push_back({{0, 0}, {16, 16}, 5});
    HeightfieldScene scene = gen_scene(box_spec, test_frame(100), 1);
    double ang = 10 * M_PI / 180;
    SatCamera obl = nadir_cam(100, -2);
    obl.view_dir = Vec3(std::sin(ang), 0, -std::cos(ang));
    obl.ground_anchor = Vec2(-16 - 100 * std::tan(ang), -16);

    // walk along scanline v=16 and find the step at the up-sun box edge
    double prev = -1;
    bool found = false;
    for (int u = 0; u < obl.width; ++u) {
        Ray r = make_ray(obl, scene.frame(), u, 16);
        double t = scene.surface_depth(r);
        if (prev >= 0 && std::abs(t - prev) * 100 > 2.0) {
            double jump = std::abs(t - prev) * 100 * std::cos(ang);
            CHECK(jump == doctest::Approx(5.0).epsilon(0.05));
            found = true;
        }
        prev = t;
    }
    CHECK(found);
}

TEST_CASE("continuous volume depth matches discrete rendering at N=10^4") {
    SceneSpec spec;
    spec.boxes.push_back({{-5, 2}, {12, 9}, 7});
    spec.ramps.push_back({{5, -14}, {14, -6}, 0.0, 6.0, 0});
    spec.kappa = 200;
    HeightfieldScene scene = gen_scene(spec, test_frame(60), 1);
    SatCamera cam = nadir_cam(40, -2, 32);
    cam.view_dir = Vec3(std::sin(0.15), 0.05, -std::cos(0.15)).normalized();
    cam.ground_anchor = Vec2(-16, -16);

    Rng rng(5);
    const int N = 10000;
    for (int trial = 0; trial < 12; ++trial) {
        int u = int(rng.uniform_int(cam.width));
        int v = int(rng.uniform_int(cam.height));
        Ray ray = make_ray(cam, scene.frame(), u, v);
        RaySamples s = midpoint_sample(ray, N);
        std::vector<real> sv(static_cast<size_t>(N)), dv(static_cast<size_t>(N));
        for (int i = 0; i < N; ++i) {
            Vec3 p = surface_point(ray, s.t[size_t(i)]);
            sv[size_t(i)] = real(scene.sigma_at(p));
            dv[size_t(i)] = real(s.delta[size_t(i)]);
        }
        Tensor w = render_weights(alphas(Tensor::from({N}, sv), Tensor::from({N}, dv)));
        double discrete = double(composite(w, Tensor::from({N}, std::vector<double>(
                                                                    s.t.begin(), s.t.end())))
                                     .value());
        double continuous = scene.continuous_volume_depth(ray);
        CHECK(std::abs(discrete - continuous) <= 2.0 * (ray.t_far - ray.t_near) / N);
    }
}

TEST_CASE("ground truth rendering: identity transform reproduces the albedo exactly") {
    SceneSpec spec;
    spec.boxes.push_back({{0, 0}, {12, 12}, 6});
    HeightfieldScene scene = gen_scene(spec, test_frame(100), 3);
    SatCamera cam = nadir_cam(100, -1, 24);
    PerImageColor ident;
    GroundTruthView view = render_ground_truth(scene, cam, ident, false);
    for (int v = 0; v < cam.height; v += 3)
        for (int u = 0; u < cam.width; u += 3) {
            Ray r = make_ray(cam, scene.frame(), u, v);
            Vec3 hit = surface_point(r, scene.surface_depth(r)) * scene.frame().scale;
            auto alb = scene.albedo(hit.x, hit.y);
            for (int k = 0; k < 3; ++k)
                CHECK(int(view.image.at(u, v, k)) == int(std::lround(alb[size_t(k)] * 255.0)));
            CHECK(double(view.depth.at(u, v)) ==
                  doctest::Approx(scene.surface_depth(r)).epsilon(1e-6));
        }
}

TEST_CASE("depth maps are consistent across views (unproject lands on the surface)") {
    DatasetSpec spec = toy_jax_preset(11);
    spec.image_size = 24;
    spec.n_sparse_points = 32;
    std::string dir = "/tmp/satgeo_test_ds_consistency";
    fs::remove_all(dir);
    generate_dataset(spec, dir);
    Dataset ds = load_dataset(dir, true);
    Rng rng(9);
    for (const SatCamera& cam : ds.cameras) {
        for (int probe = 0; probe < 40; ++probe) {
            int u = int(rng.uniform_int(cam.width));
            int v = int(rng.uniform_int(cam.height));
            Ray r = make_ray(cam, ds.frame, u, v);
            double t = double(ds.depth_gt[size_t(cam.image_id)].at(u, v));
            HeightfieldScene scene(ds.spec.scene, ds.frame, ds.spec.seed);
            // the hit must straddle the solid boundary along the ray: empty
            // space just before, solid just after (covers tops and walls)
            double eps = 1e-6;
            Vec3 before = surface_point(r, t - eps);
            Vec3 after = surface_point(r, t + eps);
            CHECK(scene.sigma_at(before) == 0.0);
            CHECK(scene.sigma_at(after) > 0.0);
            // nadir rays always land on the top surface z = h(x, y)
            if (std::abs(cam.view_dir.z + 1.0) < 1e-9) {
                Vec3 p = ds.frame.to_utm(surface_point(r, t));
                double h = scene.height(p.x - ds.frame.origin_utm.x, p.y - ds.frame.origin_utm.y);
                CHECK(std::abs(p.z - h) < 1e-6 * ds.frame.scale);
            }
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("sparse points sit exactly on the surface and reproject to their pixel") {
    DatasetSpec dspec = toy_jax_preset(5);
    dspec.image_size = 24;
    dspec.n_sparse_points = 64;
    std::string dir = "/tmp/satgeo_test_ds_points";
    fs::remove_all(dir);
    generate_dataset(dspec, dir);
    Dataset ds = load_dataset(dir);
    HeightfieldScene scene(ds.spec.scene, ds.frame, ds.spec.seed);
    auto recs = read_sparse_point_records(dir + "/sparse_points.csv");
    REQUIRE(recs.size() == 64);
    for (const auto& r : recs) {
        double h = scene.height(r.xyz_utm.x - ds.frame.origin_utm.x,
                                r.xyz_utm.y - ds.frame.origin_utm.y);
        CHECK(r.xyz_utm.z == doctest::Approx(h).epsilon(1e-9));
        Vec2 px = reproject(ds.cameras[size_t(r.image_id)], ds.frame,
                            ds.frame.to_normalized(r.xyz_utm));
        CHECK(px.x == doctest::Approx(double(r.u)).epsilon(1e-6));
        CHECK(px.y == doctest::Approx(double(r.v)).epsilon(1e-6));
        CHECK(r.reproj_err_px >= 0.0);
    }
    fs::remove_all(dir);

    // zero pixel noise -> unit weights after loading
    DatasetSpec zspec = dspec;
    zspec.pixel_noise_px = 0.0;
    fs::remove_all(dir);
    generate_dataset(zspec, dir);
    Dataset zds = load_dataset(dir);
    for (const SparseDepthPoint& p : zds.sparse_points) CHECK(p.weight == doctest::Approx(1.0));
    fs::remove_all(dir);
}

TEST_CASE("dataset generation is deterministic and refuses non-empty dirs") {
    DatasetSpec spec = toy_jax_preset(21);
    spec.image_size = 16;
    spec.n_sparse_points = 16;
    std::string d1 = "/tmp/satgeo_test_det1", d2 = "/tmp/satgeo_test_det2";
    fs::remove_all(d1);
    fs::remove_all(d2);
    generate_dataset(spec, d1);
    generate_dataset(spec, d2);
    for (const auto& e : fs::recursive_directory_iterator(d1)) {
        if (!e.is_regular_file()) continue;
        fs::path rel = fs::relative(e.path(), d1);
        std::ifstream a(e.path(), std::ios::binary), b(d2 / rel, std::ios::binary);
        std::string ca((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string cb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        INFO("file ", rel.string());
        CHECK(ca == cb);
    }
    CHECK_THROWS_AS(generate_dataset(spec, d1), ConfigError);
    generate_dataset(spec, d1, true);  // --force path
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST_CASE("shadow test: sun occlusion behind a tall box") {
    SceneSpec spec;
    spec.boxes.push_back({{0, 0}, {10, 10}, 12});
    HeightfieldScene scene = gen_scene(spec, test_frame(100), 1);
    Vec3 sun = Vec3(0.6, 0, -0.8).normalized();
    // point just down-sun of the box at ground level: occluded
    CHECK(scene.sun_occluded(Vec3(0.06, 0, 1e-4), sun));
    // far away: lit
    CHECK(!scene.sun_occluded(Vec3(0.3, 0.3, 1e-4), sun));
}
