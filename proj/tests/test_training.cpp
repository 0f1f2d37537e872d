#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "satgeo/training.hpp"

using namespace satgeo;
namespace fs = std::filesystem;

namespace {

std::string mini_dataset() {
    static std::string dir;
    if (dir.empty()) {
        dir = "/tmp/satgeo_test_train_ds";
        fs::remove_all(dir);
        DatasetSpec spec = toy_jax_preset(3);
        spec.n_images = 3;
        spec.image_size = 16;
        spec.pixel_spacing = 4.0;  // keep the 64 m footprint at 16 px
        spec.dsm_resolution = 2.0;
        spec.n_sparse_points = 48;
        generate_dataset(spec, dir);
    }
    return dir;
}

TrainConfig mini_config() {
    TrainConfig c;
    c.arch.backbone_layers = 2;
    c.arch.backbone_width = 16;
    c.arch.proj_width = 8;
    c.arch.embed_dim = 2;
    c.arch.l_pos = 4;
    c.arch.l_dir = 2;
    c.total_iterations = 60;
    c.batch_size = 32;
    c.n_samples = 16;
    c.log_interval = 20;
    c.psnr_probe_rays = 64;
    c.ds_batch = 16;
    c.threads = 1;
    c.seed = 7;
    return c;
}

bool params_equal(const FieldParams& a, const FieldParams& b) {
    auto pa = a.parameters();
    auto pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (size_t i = 0; i < pa.size(); ++i) {
        if (pa[i]->size() != pb[i]->size()) return false;
        for (int64_t k = 0; k < pa[i]->size(); ++k)
            if ((*pa[i])[k] != (*pb[i])[k]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("adam closed forms") {
    Rng rng(1);
    Tensor p = Tensor::uniform({4}, -1, 1, rng, true);
    std::vector<real> orig = p.values();
    std::vector<Tensor*> params{&p};
    AdamState st = adam_init(params);

    // zero gradient leaves parameters unchanged
    adam_step(params, {std::vector<real>(4, 0)}, st, 0.01);
    for (int i = 0; i < 4; ++i) CHECK(p[i] == orig[i]);

    // first step from zero state: delta = -lr * g / (|g| + eps)
    Tensor q = Tensor::from({3}, std::vector<real>{real(0.5), real(-2.0), real(7.0)}, true);
    std::vector<Tensor*> qp{&q};
    AdamState st2 = adam_init(qp);
    std::vector<real> g{real(0.1), real(-0.4), real(3.0)};
    adam_step(qp, {g}, st2, 0.01);
    for (int i = 0; i < 3; ++i) {
        double want = double(real(0.5 * (i == 0) - 2.0 * (i == 1) + 7.0 * (i == 2))) -
                      0.01 * double(g[size_t(i)]) / (std::abs(double(g[size_t(i)])) + 1e-8);
        CHECK(double(q[i]) == doctest::Approx(want).epsilon(1e-5));
    }

    // constant gradient: step size approaches lr * sign(g)
    Tensor r = Tensor::scalar(0, true);
    std::vector<Tensor*> rp{&r};
    AdamState st3 = adam_init(rp);
    real prev = 0;
    double step_size = 0;
    for (int it = 0; it < 400; ++it) {
        prev = r.value();
        adam_step(rp, {{real(2.5)}}, st3, 0.01);
        step_size = double(prev - r.value());
    }
    CHECK(step_size == doctest::Approx(0.01).epsilon(1e-3));
}

TEST_CASE("two runs with equal seeds are bit-identical, across thread counts") {
    Dataset ds = load_dataset(mini_dataset());
    TrainConfig cfg = mini_config();
    cfg.total_iterations = 30;

    Trainer a(cfg, ds);
    for (int i = 0; i < 30; ++i) a.step();

    Trainer b(cfg, ds);
    for (int i = 0; i < 30; ++i) b.step();
    CHECK(params_equal(a.params(), b.params()));

    TrainConfig cfg2 = cfg;
    cfg2.threads = 2;
    Trainer c(cfg2, ds);
    for (int i = 0; i < 30; ++i) c.step();
    CHECK(params_equal(a.params(), c.params()));
}

TEST_CASE("planarity contributes exactly zero gradient before epoch 3") {
    Dataset ds = load_dataset(mini_dataset());
    TrainConfig on = mini_config();
    TrainConfig off = mini_config();
    off.enable_planarity = false;

    Trainer ta(on, ds), tb(off, ds);
    // epoch 1 (iters/epoch = ceil(3*256/32) = 24)
    CHECK(ta.epoch() == 1);
    auto ga = ta.compute_gradients();
    auto gb = tb.compute_gradients();
    REQUIRE(ga.size() == gb.size());
    for (size_t i = 0; i < ga.size(); ++i)
        for (size_t k = 0; k < ga[i].size(); ++k) CHECK(ga[i][k] == gb[i][k]);

    // once epoch 3 is reached the planarity gradients must differ
    ta.resume_at(48);
    tb.resume_at(48);
    CHECK(ta.epoch() == 3);
    auto ga3 = ta.compute_gradients();
    auto gb3 = tb.compute_gradients();
    bool any_diff = false;
    for (size_t i = 0; i < ga3.size(); ++i)
        for (size_t k = 0; k < ga3[i].size(); ++k) any_diff = any_diff || ga3[i][k] != gb3[i][k];
    CHECK(any_diff);
}

TEST_CASE("depth supervision contributes exactly zero gradient after its window") {
    Dataset ds = load_dataset(mini_dataset());
    TrainConfig cfg = mini_config();
    cfg.total_iterations = 40;  // ds active for iters < 10

    Trainer on(cfg, ds);
    for (int i = 0; i < 12; ++i) on.step();
    CHECK(on.current_schedule().lambda_ds == 0.0);

    TrainConfig off = cfg;
    off.enable_ds = false;
    Trainer mirror(off, ds);
    mirror.params().copy_values_from(on.params());
    mirror.resume_at(12);
    auto ga = on.compute_gradients();
    auto gb = mirror.compute_gradients();
    for (size_t i = 0; i < ga.size(); ++i)
        for (size_t k = 0; k < ga[i].size(); ++k) CHECK(ga[i][k] == gb[i][k]);

    // inside the window the two configurations must differ
    Trainer early_on(cfg, ds), early_off(off, ds);
    auto g1 = early_on.compute_gradients();
    auto g2 = early_off.compute_gradients();
    bool any_diff = false;
    for (size_t i = 0; i < g1.size(); ++i)
        for (size_t k = 0; k < g1[i].size(); ++k) any_diff = any_diff || g1[i][k] != g2[i][k];
    CHECK(any_diff);
}

TEST_CASE("disabled regularizers are inert: absurd weights change nothing when off") {
    Dataset ds = load_dataset(mini_dataset());
    TrainConfig a = mini_config();
    a.enable_planarity = a.enable_granularity = a.enable_ds = false;
    a.total_iterations = 50;  // covers the epoch-3 switch at iter 48

    TrainConfig b = a;
    b.lambda_planar = 999.0;
    b.lambda_ds = 123456.0;

    Trainer ta(a, ds), tb(b, ds);
    for (int i = 0; i < 50; ++i) {
        ta.step();
        tb.step();
    }
    CHECK(params_equal(ta.params(), tb.params()));
}

TEST_CASE("training improves the probe PSNR on a mini scene") {
    Dataset ds = load_dataset(mini_dataset());
    TrainConfig cfg = mini_config();
    cfg.total_iterations = 700;
    Trainer t(cfg, ds);
    double before = t.probe_psnr();
    for (int i = 0; i < 700; ++i) {
        auto st = t.step();
        CHECK(std::isfinite(st.loss_total));
    }
    double after = t.probe_psnr();
    INFO("probe psnr ", before, " -> ", after);
    CHECK(after > before + 1.0);
}

TEST_CASE("divergence aborts with a numeric error") {
    Dataset ds = load_dataset(mini_dataset());
    TrainConfig cfg = mini_config();
    cfg.learning_rate = 1e12;
    cfg.total_iterations = 500;
    Trainer t(cfg, ds);
    bool threw = false;
    try {
        for (int i = 0; i < 500; ++i) t.step();
    } catch (const NumericError&) {
        threw = true;
    }
    CHECK(threw);
}

TEST_CASE("train() writes metrics and a loadable checkpoint") {
    Dataset ds = load_dataset(mini_dataset());
    TrainConfig cfg = mini_config();
    cfg.total_iterations = 25;
    cfg.checkpoint_interval = 10;
    std::string out = "/tmp/satgeo_test_train_out";
    fs::remove_all(out);
    Trainer t(cfg, ds);
    t.train(out);
    REQUIRE(fs::exists(out + "/checkpoint.bin"));
    REQUIRE(fs::exists(out + "/metrics.csv"));
    REQUIRE(fs::exists(out + "/checkpoint_00000010.bin"));

    std::ifstream m(out + "/metrics.csv");
    std::string header;
    std::getline(m, header);
    CHECK(header == "iter,loss_total,loss_color,loss_planar,loss_ds,psnr_probe");

    TrainConfig loaded_cfg = cfg;
    loaded_cfg.arch.num_images = int(ds.cameras.size());
    FieldParams p = FieldParams::load(out + "/checkpoint.bin", loaded_cfg.arch);
    CHECK(params_equal(p, t.params()));
    fs::remove_all(out);
}

TEST_CASE("render_view is deterministic and evaluate_field reports finite metrics") {
    Dataset ds = load_dataset(mini_dataset());
    TrainConfig cfg = mini_config();
    cfg.total_iterations = 120;
    Trainer t(cfg, ds);
    for (int i = 0; i < 120; ++i) t.step();

    RenderedView v1 = render_view(t.params(), ds.cameras[0], ds.frame, t.config());
    RenderedView v2 = render_view(t.params(), ds.cameras[0], ds.frame, t.config());
    REQUIRE(v1.rgb.data.size() == v2.rgb.data.size());
    for (size_t i = 0; i < v1.rgb.data.size(); ++i) CHECK(v1.rgb.data[i] == v2.rgb.data[i]);
    for (size_t i = 0; i < v1.depth.data.size(); ++i) CHECK(v1.depth.data[i] == v2.depth.data[i]);

    EvalReport rep = evaluate_field(t.params(), ds, t.config());
    REQUIRE(rep.per_view.size() == ds.cameras.size());
    CHECK(std::isfinite(rep.mean_mae_m));
    CHECK(rep.mean_mae_m >= 0.0);
    CHECK(rep.mean_psnr_db > 0.0);
}

TEST_CASE("config json round trip, manifest acceptance, thread resolution") {
    TrainConfig c = mini_config();
    c.p_n = 0.25;
    c.partial_mode = PartialRayMode::kSymmetric;
    c.enable_granularity = false;
    TrainConfig back = train_config_from_json(train_config_to_json(c));
    CHECK(back.p_n == doctest::Approx(0.25));
    CHECK(back.partial_mode == PartialRayMode::kSymmetric);
    CHECK(back.enable_granularity == false);
    CHECK(back.arch.backbone_width == c.arch.backbone_width);
    CHECK(back.seed == c.seed);

    // manifests (object with a "config" key) load the same way
    std::string manifest = "{\"config\": " + train_config_to_json(c) + ", \"version\": \"x\"}";
    TrainConfig from_manifest = train_config_from_json(manifest);
    CHECK(from_manifest.batch_size == c.batch_size);

    setenv("SATGEO_THREADS", "1", 1);
    CHECK(resolve_threads(8) == 1);
    unsetenv("SATGEO_THREADS");
    CHECK(resolve_threads(3) == 3);
}
