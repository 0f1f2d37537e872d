#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "satgeo/regularizers.hpp"
#include "satgeo/rendering.hpp"

using namespace satgeo;

TEST_CASE("explicit_normal: flat ground, tilted plane, degeneracy") {
    NormalResult flat = explicit_normal({0, 0, 0}, {1, 0, 0}, {0, 1, 0}, 1, 1);
    REQUIRE(!flat.degenerate);
    CHECK(flat.n.x == doctest::Approx(0));
    CHECK(flat.n.y == doctest::Approx(0));
    CHECK(flat.n.z == doctest::Approx(1));

    // plane z = x: normal (-1, 0, 1)/sqrt(2)
    NormalResult tilt = explicit_normal({0, 0, 0}, {1, 0, 1}, {0, 1, 0}, 1, 1);
    REQUIRE(!tilt.degenerate);
    CHECK(tilt.n.x == doctest::Approx(-1.0 / std::sqrt(2.0)));
    CHECK(tilt.n.y == doctest::Approx(0));
    CHECK(tilt.n.z == doctest::Approx(1.0 / std::sqrt(2.0)));

    NormalResult degen = explicit_normal({0, 0, 0}, {1, 0, 0}, {2, 0, 0}, 1, 1);
    CHECK(degen.degenerate);
}

TEST_CASE("explicit_normal: sign canonicalization over all four neighbor draws") {
    // horizontal patch sampled on each side combination must give +z
    Vec3 p(0, 0, 0);
    struct Draw {
        Vec3 p1, p2;
        int sx, sy;
    };
    std::vector<Draw> draws = {
        {{1, 0, 0}, {0, 1, 0}, 1, 1},
        {{-1, 0, 0}, {0, 1, 0}, -1, 1},
        {{1, 0, 0}, {0, -1, 0}, 1, -1},
        {{-1, 0, 0}, {0, -1, 0}, -1, -1},
    };
    for (const auto& d : draws) {
        NormalResult r = explicit_normal(p, d.p1, d.p2, d.sx, d.sy);
        REQUIRE(!r.degenerate);
        CHECK(r.n.z == doctest::Approx(1.0));
    }
}

TEST_CASE("planarity_loss closed forms") {
    auto patch_loss = [](const Vec3& p, const Vec3& p1, const Vec3& p2) {
        std::vector<real> pv{real(p.x), real(p.y), real(p.z)};
        std::vector<real> p1v{real(p1.x), real(p1.y), real(p1.z)};
        std::vector<real> p2v{real(p2.x), real(p2.y), real(p2.z)};
        NormalBatch nb = explicit_normal_batch(Tensor::from({1, 3}, pv), Tensor::from({1, 3}, p1v),
                                               Tensor::from({1, 3}, p2v), {1});
        return double(planarity_loss(nb).value());
    };
    // horizontal
    CHECK(patch_loss({0, 0, 0}, {1, 0, 0}, {0, 1, 0}) < 1e-6);
    // vertical wall: n perpendicular to g -> sqrt(2)
    CHECK(patch_loss({0, 0, 0}, {0, 1, 0}, {0, 0, 1}) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-5));
    // 45 degree plane: sqrt(2 - sqrt(2))
    CHECK(patch_loss({0, 0, 0}, {1, 0, 1}, {0, 1, 0}) ==
          doctest::Approx(std::sqrt(2.0 - std::sqrt(2.0))).epsilon(1e-4));
}

TEST_CASE("planarity per-patch distance agrees with the cosine identity") {
    Rng rng(15);
    for (int rep = 0; rep < 100; ++rep) {
        Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        Vec3 p1 = p + Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.3;
        Vec3 p2 = p + Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.3;
        NormalResult r = explicit_normal(p, p1, p2, 1, 1);
        if (r.degenerate) continue;
        Vec3 g(0, 0, 1);
        double dist = (g - r.n).norm();
        double cosform = std::sqrt(2.0 * (1.0 - g.dot(r.n)));
        CHECK(std::abs(dist - cosform) < 1e-6);
        CHECK(dist >= 0.0);
        CHECK(dist <= 2.0 + 1e-12);
    }
}

TEST_CASE("planarity_loss is zero iff every normal equals g") {
    // mixed batch: one horizontal + one tilted -> strictly positive
    std::vector<real> p{0, 0, 0, 0, 0, 0};
    std::vector<real> p1{1, 0, 0, 1, 0, real(0.4)};
    std::vector<real> p2{0, 1, 0, 0, 1, 0};
    NormalBatch nb = explicit_normal_batch(Tensor::from({2, 3}, p), Tensor::from({2, 3}, p1),
                                           Tensor::from({2, 3}, p2), {1, 1});
    CHECK(double(planarity_loss(nb).value()) > 1e-3);

    std::vector<real> flat1{1, 0, 0, 1, 0, 0};
    NormalBatch nb2 = explicit_normal_batch(Tensor::from({2, 3}, p), Tensor::from({2, 3}, flat1),
                                            Tensor::from({2, 3}, p2), {1, 1});
    CHECK(double(planarity_loss(nb2).value()) < 1e-6);
}

TEST_CASE("degenerate patches are excluded and contribute exactly zero gradient") {
    // second patch collinear -> excluded
    std::vector<real> pv{0, 0, 0, /**/ 5, 5, 5};
    std::vector<real> p1v{1, 0, 0, /**/ 6, 5, 5};
    std::vector<real> p2v{0, 1, real(0.2), /**/ 7, 5, 5};
    Tensor p = Tensor::from({2, 3}, pv, true);
    Tensor p1 = Tensor::from({2, 3}, p1v, true);
    Tensor p2 = Tensor::from({2, 3}, p2v, true);
    NormalBatch nb = explicit_normal_batch(p, p1, p2, {1, 1});
    REQUIRE(nb.rows.size() == 1);
    CHECK(nb.rows[0] == 0);
    Tensor loss = planarity_loss(nb);
    GradMap gm = backward(loss);
    auto gp = gm.get(p);
    bool first_nonzero = false;
    for (int k = 0; k < 3; ++k) first_nonzero = first_nonzero || gp[size_t(k)] != real(0);
    CHECK(first_nonzero);
    for (int k = 3; k < 6; ++k) CHECK(gp[size_t(k)] == real(0));
    for (real v : loss.values()) CHECK(std::isfinite(double(v)));
}

TEST_CASE("planarity loss of a 3-point patch passes grad_check") {
    Rng rng(23);
    // pack the three points into one [3,3] tensor: rows p, p1, p2
    for (int rep = 0; rep < 5; ++rep) {
        Tensor x = Tensor::uniform({3, 3}, -1, 1, rng);
        // reject nearly-degenerate draws (kinked region)
        Vec3 p{double(x[0]), double(x[1]), double(x[2])};
        Vec3 p1{double(x[3]), double(x[4]), double(x[5])};
        Vec3 p2{double(x[6]), double(x[7]), double(x[8])};
        NormalResult nr = explicit_normal(p, p1, p2, 1, 1);
        if (nr.degenerate || (Vec3(0, 0, 1) - nr.n).norm() < 0.05) continue;
        double err = grad_check(
            [](const Tensor& t) {
                NormalBatch nb = explicit_normal_batch(slice(t, 0, 0, 1), slice(t, 0, 1, 1),
                                                       slice(t, 0, 2, 1), {1});
                return planarity_loss(nb);
            },
            x, 1e-3);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("planarity couples all three rays through rendered depths") {
    // three parallel rays: main at (0,0), neighbors offset along x and y;
    // per-ray densities are free parameters
    const int N = 16;
    Rng rng(19);
    Tensor sigma0 = Tensor::uniform({3, N}, real(0.5), real(3.0), rng);
    Tensor delta = Tensor::full({3, N}, real(1.0 / N));
    std::vector<real> tv;
    for (int r = 0; r < 3; ++r)
        for (int i = 0; i < N; ++i) tv.push_back(real((i + 0.5) / N));
    Tensor tvals = Tensor::from({3, N}, tv);
    std::vector<real> ov{0, 0, 1, /**/ real(0.05), 0, 1, /**/ 0, real(0.05), 1};
    Tensor origins = Tensor::from({3, 3}, ov);
    std::vector<real> dv{0, 0, -1, 0, 0, -1, 0, 0, -1};
    Tensor dirs = Tensor::from({3, 3}, dv);

    auto loss_of = [&](const Tensor& sigma) {
        Tensor w = render_weights(alphas(sigma, delta));
        Tensor depth = composite(w, tvals);               // [3]
        Tensor pos = add(origins, mul(dirs, reshape(depth, {3, 1})));
        NormalBatch nb = explicit_normal_batch(slice(pos, 0, 0, 1), slice(pos, 0, 1, 1),
                                               slice(pos, 0, 2, 1), {1});
        return planarity_loss(nb);
    };

    Tensor sigma = Tensor::from(sigma0.shape(), sigma0.values(), true);
    GradMap gm = backward(loss_of(sigma));
    auto g = gm.get(sigma);
    for (int r = 0; r < 3; ++r) {
        double mag = 0;
        for (int i = 0; i < N; ++i) mag += std::abs(double(g[size_t(r * N + i)]));
        INFO("ray ", r, " |grad| ", mag);
        CHECK(mag > 0.0);  // gradient reaches samples on every participating ray
    }

    CHECK(grad_check(loss_of, sigma0, 3e-3) < (sizeof(real) == 4 ? 1e-3 : 1e-6));

    // perturbing only the x-neighbor's density changes the loss
    double base = double(loss_of(sigma0).value());
    std::vector<real> bumped = sigma0.values();
    for (int i = 0; i < N; ++i) bumped[size_t(N + i)] += real(0.5);
    double after = double(loss_of(Tensor::from({3, N}, bumped)).value());
    CHECK(std::abs(after - base) > 1e-6);
}

TEST_CASE("depth_supervised_loss: arithmetic, exclusion, equal-weight reduction") {
    // d == dist -> 0
    Tensor d0 = Tensor::from({2}, std::vector<real>{real(0.5), real(0.7)});
    DepthSupervision z =
        depth_supervised_loss(d0, {0.5, 0.7}, {1.0, 1.0}, {{0, 1}, {0, 1}});
    CHECK(double(z.loss.value()) == doctest::Approx(0.0));
    CHECK(z.used == 2);

    // w=2, d=1.0, dist=0.8 -> 2 * 0.04 = 0.08
    Tensor d1 = Tensor::from({1}, std::vector<real>{1});
    DepthSupervision s = depth_supervised_loss(d1, {0.8}, {2.0}, {{0, 2}});
    CHECK(double(s.loss.value()) == doctest::Approx(0.08).epsilon(1e-5));

    // out-of-span points are excluded and counted
    Tensor d2 = Tensor::from({3}, std::vector<real>{real(0.5), real(0.5), real(0.5)});
    DepthSupervision ex =
        depth_supervised_loss(d2, {0.4, 5.0, 0.6}, {1, 1, 1}, {{0, 1}, {0, 1}, {0, 1}});
    CHECK(ex.used == 2);
    CHECK(ex.skipped == 1);

    // equal weights reduce to w * mean squared error
    Rng rng(33);
    std::vector<real> pd;
    std::vector<double> dist, wts;
    std::vector<std::pair<double, double>> spans;
    double mse = 0;
    for (int i = 0; i < 10; ++i) {
        double p = rng.uniform(0, 1), t = rng.uniform(0, 1);
        pd.push_back(real(p));
        dist.push_back(t);
        wts.push_back(0.7);
        spans.push_back({0, 1});
        mse += (p - t) * (p - t);
    }
    mse /= 10;
    DepthSupervision eq = depth_supervised_loss(Tensor::from({10}, pd), dist, wts, spans);
    CHECK(double(eq.loss.value()) == doctest::Approx(0.7 * mse).epsilon(1e-4));

    // gradient check through gather/exclusion
    double err = grad_check(
        [&](const Tensor& t) {
            return depth_supervised_loss(t, {0.4, 5.0, 0.6}, {1.5, 1.0, 0.5},
                                         {{0, 1}, {0, 1}, {0, 1}})
                .loss;
        },
        Tensor::from({3}, std::vector<real>{real(0.5), real(0.5), real(0.5)}), 1e-3);
    CHECK(err < 1e-3);
}

TEST_CASE("reproj_weight rule") {
    CHECK(reproj_weight(0.0) == doctest::Approx(1.0));
    CHECK(reproj_weight(1.0) == doctest::Approx(0.5));
    CHECK(reproj_weight(100.0) == doctest::Approx(0.1));  // clamped
    CHECK_THROWS_AS(reproj_weight(-1.0), DomainError);
}

TEST_CASE("loss_schedule follows the training plan") {
    ScheduleConfig cfg;
    cfg.total_iterations = 10000;
    cfg.iters_per_epoch = 500;
    cfg.granularity_T = 1000;

    // epoch 1: color mode, planarity off, depth supervision on
    ScheduleState e1 = loss_schedule(0, 1, cfg);
    CHECK(!e1.uncertainty_mode);
    CHECK(e1.lambda_planar == 0.0);
    CHECK(e1.lambda_ds == doctest::Approx(1000.0));

    // epoch 3 at 30% of iterations: uncertainty mode, planarity on, ds off
    ScheduleState e3 = loss_schedule(3000, 7, cfg);
    CHECK(e3.uncertainty_mode);
    CHECK(e3.lambda_planar == doctest::Approx(0.1));
    CHECK(e3.lambda_ds == 0.0);

    // granularity: mask opens at T and stays open
    CHECK(loss_schedule(999, 2, cfg).mask_iter == 999);
    CHECK(loss_schedule(5000, 9, cfg).mask_iter == 5000);

    // switches gate the terms entirely
    ScheduleConfig off = cfg;
    off.enable_planarity = off.enable_ds = off.enable_granularity = false;
    ScheduleState s = loss_schedule(3000, 7, off);
    CHECK(s.lambda_planar == 0.0);
    CHECK(s.lambda_ds == 0.0);
    CHECK(s.mask_iter >= off.granularity_T);  // fully open from the start
}

TEST_CASE("sparse point csv round trip and weight derivation") {
    std::vector<SparsePointRecord> recs;
    SparsePointRecord r;
    r.image_id = 2;
    r.u = 10;
    r.v = 20;
    r.xyz_utm = Vec3(1005.5, 2010.25, 7.125);
    r.reproj_err_px = 1.0;
    recs.push_back(r);
    std::string path = "/tmp/satgeo_test_points.csv";
    save_sparse_points_csv(path, recs);

    SceneFrame frame;
    frame.origin_utm = Vec3(1000, 2000, 0);
    frame.scale = 50;
    auto pts = load_sparse_points_csv(path, frame);
    REQUIRE(pts.size() == 1);
    CHECK(pts[0].image_id == 2);
    CHECK(pts[0].u == 10);
    CHECK(pts[0].x.x == doctest::Approx(5.5 / 50));
    CHECK(pts[0].x.z == doctest::Approx(7.125 / 50));
    CHECK(pts[0].weight == doctest::Approx(0.5));
    std::remove(path.c_str());

    std::ofstream bad("/tmp/satgeo_bad_points.csv");
    bad << "wrong,header\n";
    bad.close();
    CHECK_THROWS_AS(load_sparse_points_csv("/tmp/satgeo_bad_points.csv", frame), ConfigError);
    std::remove("/tmp/satgeo_bad_points.csv");
}
