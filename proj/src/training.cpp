#include "satgeo/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

namespace fs = std::filesystem;

namespace satgeo {

namespace {
// Fixed so results are invariant to the worker count: chunks are computed by
// any thread but reduced in chunk order.
constexpr int kChunkRays = 64;
constexpr int kChunkPoints = 64;
}  // namespace

void TrainConfig::validate() const {
    if (total_iterations < 1) throw ConfigError("TrainConfig.total_iterations: must be >= 1");
    if (batch_size < 1) throw ConfigError("TrainConfig.batch_size: must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("TrainConfig.learning_rate: must be positive");
    if (lr_schedule != "constant" && lr_schedule != "cosine")
        throw ConfigError("TrainConfig.lr_schedule: must be 'constant' or 'cosine'");
    if (n_samples < 2) throw ConfigError("TrainConfig.n_samples: must be >= 2");
    if (!(p_n > 0) || p_n > 1) throw ConfigError("TrainConfig.p_n: must be in (0, 1]");
    if (ds_fraction < 0 || ds_fraction > 1)
        throw ConfigError("TrainConfig.ds_fraction: must be in [0, 1]");
    if (granularity_fraction < 0 || granularity_fraction > 1)
        throw ConfigError("TrainConfig.granularity_fraction: must be in [0, 1]");
    if (granularity_bias >= 0 && granularity_bias > double(arch.l_pos))
        throw ConfigError("TrainConfig.granularity_bias: must be <= l_pos");
    if (lambda_planar < 0 || lambda_ds < 0)
        throw ConfigError("TrainConfig: loss weights must be non-negative");
    if (psnr_probe_rays < 1) throw ConfigError("TrainConfig.psnr_probe_rays: must be >= 1");
    if (ds_batch < 1) throw ConfigError("TrainConfig.ds_batch: must be >= 1");
    if (shading_samples < 2) throw ConfigError("TrainConfig.shading_samples: must be >= 2");
}

int64_t TrainConfig::granularity_T() const {
    return std::max<int64_t>(1, int64_t(granularity_fraction * double(total_iterations)));
}

double TrainConfig::granularity_b() const {
    return granularity_bias < 0 ? double(arch.l_pos) / 2.0 : granularity_bias;
}

std::string train_config_to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["total_iterations"] = c.total_iterations;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate;
    j["lr_schedule"] = c.lr_schedule;
    j["n_samples"] = c.n_samples;
    j["p_n"] = c.p_n;
    j["partial_mode"] = c.partial_mode == PartialRayMode::kCentered ? "centered" : "symmetric";
    j["lambda_planar"] = c.lambda_planar;
    j["lambda_ds"] = c.lambda_ds;
    j["ds_fraction"] = c.ds_fraction;
    j["granularity"] = {{"t_fraction", c.granularity_fraction}, {"bias", c.granularity_bias}};
    j["enable_planarity"] = c.enable_planarity;
    j["enable_granularity"] = c.enable_granularity;
    j["enable_depth_supervision"] = c.enable_ds;
    j["flat_mask_index"] = c.flat_mask_index;
    j["enable_shading"] = c.enable_shading;
    j["shading_samples"] = c.shading_samples;
    j["arch"] = {{"backbone_layers", c.arch.backbone_layers},
                 {"backbone_width", c.arch.backbone_width},
                 {"proj_width", c.arch.proj_width},
                 {"embed_dim", c.arch.embed_dim},
                 {"l_pos", c.arch.l_pos},
                 {"l_dir", c.arch.l_dir},
                 {"beta_min", double(c.arch.beta_min)},
                 {"num_images", c.arch.num_images}};
    j["seed"] = c.seed;
    j["log_interval"] = c.log_interval;
    j["checkpoint_interval"] = c.checkpoint_interval;
    j["psnr_probe_rays"] = c.psnr_probe_rays;
    j["ds_batch"] = c.ds_batch;
    j["threads"] = c.threads;
    return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, true, true);
    if (j.contains("config")) j = j.at("config");  // run manifest
    TrainConfig c;
    c.total_iterations = j.value("total_iterations", c.total_iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
    c.n_samples = j.value("n_samples", c.n_samples);
    c.p_n = j.value("p_n", c.p_n);
    std::string pm = j.value("partial_mode", "centered");
    if (pm != "centered" && pm != "symmetric")
        throw ConfigError("TrainConfig.partial_mode: must be 'centered' or 'symmetric'");
    c.partial_mode = pm == "centered" ? PartialRayMode::kCentered : PartialRayMode::kSymmetric;
    c.lambda_planar = j.value("lambda_planar", c.lambda_planar);
    c.lambda_ds = j.value("lambda_ds", c.lambda_ds);
    c.ds_fraction = j.value("ds_fraction", c.ds_fraction);
    if (j.contains("granularity")) {
        c.granularity_fraction = j["granularity"].value("t_fraction", c.granularity_fraction);
        c.granularity_bias = j["granularity"].value("bias", c.granularity_bias);
    }
    c.enable_planarity = j.value("enable_planarity", c.enable_planarity);
    c.enable_granularity = j.value("enable_granularity", c.enable_granularity);
    c.enable_ds = j.value("enable_depth_supervision", c.enable_ds);
    c.flat_mask_index = j.value("flat_mask_index", c.flat_mask_index);
    c.enable_shading = j.value("enable_shading", c.enable_shading);
    c.shading_samples = j.value("shading_samples", c.shading_samples);
    if (j.contains("arch")) {
        const auto& a = j["arch"];
        c.arch.backbone_layers = a.value("backbone_layers", c.arch.backbone_layers);
        c.arch.backbone_width = a.value("backbone_width", c.arch.backbone_width);
        c.arch.proj_width = a.value("proj_width", c.arch.proj_width);
        c.arch.embed_dim = a.value("embed_dim", c.arch.embed_dim);
        c.arch.l_pos = a.value("l_pos", c.arch.l_pos);
        c.arch.l_dir = a.value("l_dir", c.arch.l_dir);
        c.arch.beta_min = real(a.value("beta_min", double(c.arch.beta_min)));
        c.arch.num_images = a.value("num_images", c.arch.num_images);
    }
    c.seed = j.value("seed", c.seed);
    c.log_interval = j.value("log_interval", c.log_interval);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.psnr_probe_rays = j.value("psnr_probe_rays", c.psnr_probe_rays);
    c.ds_batch = j.value("ds_batch", c.ds_batch);
    c.threads = j.value("threads", c.threads);
    return c;
}

// ---------------------------------------------------------------- Adam

AdamState adam_init(const std::vector<Tensor*>& params) {
    AdamState s;
    for (const Tensor* t : params) {
        s.m.emplace_back(size_t(t->size()), 0.0);
        s.v.emplace_back(size_t(t->size()), 0.0);
    }
    return s;
}

void adam_step(std::vector<Tensor*>& params, const std::vector<std::vector<real>>& grads,
               AdamState& state, double lr) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw ShapeError("adam_step: state/gradient layout does not match parameters");
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    state.t += 1;
    double bc1 = 1.0 - std::pow(beta1, double(state.t));
    double bc2 = 1.0 - std::pow(beta2, double(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        if (int64_t(grads[i].size()) != params[i]->size())
            throw ShapeError("adam_step: gradient size mismatch at parameter " + std::to_string(i));
        std::vector<real> vals = params[i]->values();
        for (size_t k = 0; k < vals.size(); ++k) {
            double g = double(grads[i][k]);
            double m = state.m[i][k] = beta1 * state.m[i][k] + (1 - beta1) * g;
            double v = state.v[i][k] = beta2 * state.v[i][k] + (1 - beta2) * g * g;
            double mhat = m / bc1;
            double vhat = v / bc2;
            vals[k] = real(double(vals[k]) - lr * mhat / (std::sqrt(vhat) + eps));
        }
        params[i]->set_values(vals);
    }
}

int resolve_threads(int requested) {
    int n = requested > 0 ? requested : int(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    if (const char* env = std::getenv("SATGEO_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1) n = std::min(n, cap);
    }
    return n;
}

// ---------------------------------------------------------------- Trainer

struct Trainer::RayPlan {
    int image = 0, u = 0, v = 0;
};

struct Trainer::ChunkOut {
    GradMap gm;
    bool has_grad = false;
    double color_sum = 0;  // photometric loss x rays in chunk
    int rays = 0;
    double planar_sum = 0;  // sum of per-patch distances over valid patches
    int planar_valid = 0;
    double ds_sum = 0;  // weighted squared error summed over used points
    int ds_used = 0, ds_skipped = 0;
    Tensor total;  // scalar graph root (kept until backward has run)
};

Trainer::Trainer(TrainConfig cfg, const Dataset& ds)
    : cfg_(std::move(cfg)), ds_(&ds), params_(FieldParams{}) {
    cfg_.arch.num_images = int(ds.cameras.size());
    cfg_.validate();
    cfg_.arch.validate();
    params_ = FieldParams::init(cfg_.arch, cfg_.seed);
    auto plist = params_.parameters();
    adam_ = adam_init(plist);

    sched_cfg_.total_iterations = cfg_.total_iterations;
    sched_cfg_.iters_per_epoch =
        std::max<int64_t>(1, (ds.total_pixels() + cfg_.batch_size - 1) / cfg_.batch_size);
    sched_cfg_.lambda_planar = cfg_.lambda_planar;
    sched_cfg_.lambda_ds = cfg_.lambda_ds;
    sched_cfg_.ds_fraction = cfg_.ds_fraction;
    sched_cfg_.granularity_T = cfg_.granularity_T();
    sched_cfg_.enable_planarity = cfg_.enable_planarity;
    sched_cfg_.enable_granularity = cfg_.enable_granularity;
    sched_cfg_.enable_ds = cfg_.enable_ds;

    gran_.T = cfg_.granularity_T();
    gran_.b = cfg_.granularity_b();
    gran_.L = cfg_.arch.l_pos;
    gran_.flat_index = cfg_.flat_mask_index;
    pos_spec_ = EncodingSpec{cfg_.arch.l_pos, true};
    dir_spec_ = EncodingSpec{cfg_.arch.l_dir, true};

    threads_ = resolve_threads(cfg_.threads);

    for (const Image& im : ds.images) gt01_.push_back(to_float01(im));
    for (const SparseDepthPoint& p : ds.sparse_points)
        if (p.image_id < 0 || p.image_id >= int(ds.cameras.size()))
            throw ConfigError("sparse point references unknown image " + std::to_string(p.image_id));

    Rng prng(hash_stream(cfg_.seed, 0x9b0be));
    for (int i = 0; i < cfg_.psnr_probe_rays; ++i) {
        int img = int(prng.uniform_int(int64_t(ds.cameras.size())));
        PixelRef ref;
        ref.image = img;
        ref.u = int(prng.uniform_int(ds.cameras[size_t(img)].width));
        ref.v = int(prng.uniform_int(ds.cameras[size_t(img)].height));
        probe_.push_back(ref);
    }
}

void Trainer::resume_at(int64_t iter) {
    if (iter < 0 || iter > cfg_.total_iterations)
        throw ConfigError("resume_at: iteration out of range");
    iter_ = iter;
}

ScheduleState Trainer::current_schedule() const { return loss_schedule(iter_, epoch(), sched_cfg_); }

double Trainer::lr_at(int64_t iter) const {
    if (cfg_.lr_schedule == "cosine")
        return cfg_.learning_rate * 0.5 *
               (1.0 + std::cos(M_PI * double(iter) / double(cfg_.total_iterations)));
    return cfg_.learning_rate;
}

std::vector<Trainer::RayPlan> Trainer::draw_batch() const {
    Rng rng(hash_stream(cfg_.seed, 0xba7c4, uint64_t(iter_)));
    std::vector<RayPlan> rays(size_t(cfg_.batch_size));
    // uniform over all (image, pixel) pairs
    std::vector<int64_t> offsets;
    int64_t total = 0;
    for (const SatCamera& c : ds_->cameras) {
        offsets.push_back(total);
        total += int64_t(c.width) * c.height;
    }
    for (RayPlan& r : rays) {
        int64_t pick = rng.uniform_int(total);
        size_t img = size_t(std::upper_bound(offsets.begin(), offsets.end(), pick) -
                            offsets.begin() - 1);
        int64_t local = pick - offsets[img];
        const SatCamera& cam = ds_->cameras[img];
        r.image = int(img);
        r.u = int(local % cam.width);
        r.v = int(local / cam.width);
    }
    return rays;
}

namespace {

// Expands a per-ray tensor [R, D] to per-sample rows [R*N, D].
Tensor per_sample(const Tensor& per_ray, int64_t R, int64_t N) {
    int64_t D = per_ray.shape()[1];
    return reshape(broadcast_to(reshape(per_ray, {R, 1, D}), {R, N, D}), {R * N, D});
}

}  // namespace

Trainer::ChunkOut Trainer::run_chunk(int64_t chunk_idx, const std::vector<RayPlan>& rays,
                                     const ScheduleState& sched) const {
    const int64_t R_total = cfg_.batch_size;
    const int64_t N = cfg_.n_samples;
    int64_t lo = chunk_idx * kChunkRays;
    int64_t hi = std::min<int64_t>(lo + kChunkRays, int64_t(rays.size()));
    const int64_t R = hi - lo;
    Rng rng(hash_stream(cfg_.seed, 0xabc001 + uint64_t(iter_) * 0x1000, uint64_t(chunk_idx)));

    // per-ray constants
    std::vector<real> o_base(size_t(R * 3)), dir_v(size_t(R * 3)), gt_v(size_t(R * 3)),
        sun_v(size_t(R * 3)), px_over_scale(static_cast<size_t>(R));
    std::vector<int64_t> ray_ids(static_cast<size_t>(R));
    std::vector<int64_t> sample_ids(size_t(R * N));
    std::vector<real> t_v(size_t(R * N)), d_v(size_t(R * N));
    std::vector<Ray> base_rays(static_cast<size_t>(R));
    for (int64_t r = 0; r < R; ++r) {
        const RayPlan& rp = rays[size_t(lo + r)];
        const SatCamera& cam = ds_->cameras[size_t(rp.image)];
        Ray ray = make_ray(cam, ds_->frame, rp.u, rp.v);
        base_rays[size_t(r)] = ray;
        for (int k = 0; k < 3; ++k) {
            o_base[size_t(r * 3 + k)] = real(k == 0 ? ray.origin.x : k == 1 ? ray.origin.y : ray.origin.z);
            dir_v[size_t(r * 3 + k)] = real(k == 0 ? ray.dir.x : k == 1 ? ray.dir.y : ray.dir.z);
            sun_v[size_t(r * 3 + k)] =
                real(k == 0 ? cam.sun_dir.x : k == 1 ? cam.sun_dir.y : cam.sun_dir.z);
            gt_v[size_t(r * 3 + k)] = real(gt01_[size_t(rp.image)].at(rp.u, rp.v, k));
        }
        px_over_scale[size_t(r)] = real(cam.pixel_spacing / ds_->frame.scale);
        ray_ids[size_t(r)] = rp.image;
        RaySamples s = stratified_sample(ray, int(N), rng);
        for (int64_t i = 0; i < N; ++i) {
            t_v[size_t(r * N + i)] = real(s.t[size_t(i)]);
            d_v[size_t(r * N + i)] = real(s.delta[size_t(i)]);
            sample_ids[size_t(r * N + i)] = rp.image;
        }
    }

    Tensor dir_t = Tensor::from({R, 3}, dir_v);
    Tensor tvals = Tensor::from({R, N}, t_v);
    Tensor deltas = Tensor::from({R, N}, d_v);

    // learned pixel shift q (clamped to the +-5 px contract)
    Tensor q_rows = clamp(gather_rows(params_.pixel_q, ray_ids), -5, 5);
    Tensor shift = mul(q_rows, Tensor::from({R, 1}, px_over_scale));
    Tensor shift3 = concat({shift, Tensor::zeros({R, 1})}, 1);
    Tensor origin = add(Tensor::from({R, 3}, o_base), shift3);  // [R,3]

    Tensor pos = add(reshape(origin, {R, 1, 3}), mul(reshape(tvals, {R, N, 1}), reshape(dir_t, {R, 1, 3})));
    Tensor enc_x = masked_encode(reshape(pos, {R * N, 3}), pos_spec_, sched.mask_iter, gran_);
    Tensor enc_dir = per_sample(pos_encode(dir_t, dir_spec_), R, N);
    Tensor sun_s = per_sample(Tensor::from({R, 3}, sun_v), R, N);

    FieldEval field = eval_field(params_, enc_x, enc_dir, sun_s, sample_ids);
    Tensor sigma = reshape(field.sigma, {R, N});
    Tensor w = render_weights(alphas(sigma, deltas));
    Tensor depth = composite(w, tvals);  // [R]

    // shading: transmittance toward the sun from the current surface point
    Tensor s_term = Tensor::scalar(1);
    if (cfg_.enable_shading) {
        int64_t Ns = cfg_.shading_samples;
        std::vector<real> sp_t(size_t(R * Ns)), sp_d(size_t(R * Ns)), sp_o(size_t(R * 3)),
            sp_dir(size_t(R * 3));
        for (int64_t r = 0; r < R; ++r) {
            const SatCamera& cam = ds_->cameras[size_t(ray_ids[size_t(r)])];
            Vec3 up = (cam.sun_dir * -1.0).normalized();
            Vec3 sp = surface_point(base_rays[size_t(r)], double(depth[r]));
            // clip the sun ray to the scene box
            double t_exit = 4.0;
            for (int ax = 0; ax < 3; ++ax) {
                double o = ax == 0 ? sp.x : ax == 1 ? sp.y : sp.z;
                double d = ax == 0 ? up.x : ax == 1 ? up.y : up.z;
                if (std::abs(d) > 1e-12) {
                    double t1 = (1.0 - o) / d, t2 = (-1.0 - o) / d;
                    t_exit = std::min(t_exit, std::max(t1, t2));
                }
            }
            t_exit = std::max(t_exit, 1e-4);
            Ray sun_ray;
            sun_ray.origin = sp;
            sun_ray.dir = up;
            sun_ray.t_near = 1e-4;
            sun_ray.t_far = t_exit;
            RaySamples ss = midpoint_sample(sun_ray, int(Ns));
            for (int64_t i = 0; i < Ns; ++i) {
                sp_t[size_t(r * Ns + i)] = real(ss.t[size_t(i)]);
                sp_d[size_t(r * Ns + i)] = real(ss.delta[size_t(i)]);
            }
            for (int k = 0; k < 3; ++k) {
                sp_o[size_t(r * 3 + k)] = real(k == 0 ? sp.x : k == 1 ? sp.y : sp.z);
                sp_dir[size_t(r * 3 + k)] = real(k == 0 ? up.x : k == 1 ? up.y : up.z);
            }
        }
        Tensor spos = add(reshape(Tensor::from({R, 3}, sp_o), {R, 1, 3}),
                          mul(reshape(Tensor::from({R, Ns}, sp_t), {R, Ns, 1}),
                              reshape(Tensor::from({R, 3}, sp_dir), {R, 1, 3})));
        Tensor senc = masked_encode(reshape(spos, {R * Ns, 3}), pos_spec_, sched.mask_iter, gran_);
        Tensor ssigma = reshape(eval_density(params_, senc), {R, Ns});
        Tensor sun_trans = exp(neg(sum(mul(ssigma, Tensor::from({R, Ns}, sp_d)), -1)));  // [R]
        s_term = per_sample(reshape(sun_trans, {R, 1}), R, N);                           // [R*N,1]
    }

    Tensor A = gather_rows(params_.color_a, sample_ids);
    Tensor B = gather_rows(params_.color_b, sample_ids);
    Tensor c_samples = compose_color_batch(field.albedo, field.ambient, A, B, s_term);
    Tensor c_ray = composite(w, reshape(c_samples, {R, N, 3}));  // [R,3]
    Tensor gt_t = Tensor::from({R, 3}, gt_v);

    Tensor photometric;
    if (!sched.uncertainty_mode) {
        photometric = color_loss(c_ray, gt_t);
    } else {
        Tensor wsum = sum(w, -1);  // [R]
        Tensor beta_r = add(composite(w, reshape(field.beta, {R, N})),
                            mul(sub(Tensor::scalar(1), wsum), Tensor::scalar(cfg_.arch.beta_min)));
        Tensor tau_r = composite(w, reshape(field.tau, {R, N}));
        photometric = uncertainty_loss(c_ray, gt_t, beta_r, tau_r);
    }

    ChunkOut out;
    out.rays = int(R);
    out.color_sum = double(photometric.value()) * double(R);
    Tensor total = mul(photometric, Tensor::scalar(real(double(R) / double(R_total))));

    if (sched.lambda_planar > 0) {
        // adjacent rays at partial length, centered on the main depth
        int n_adj = std::max(2, int(std::llround(double(N) * cfg_.p_n)));
        std::vector<real> ao(size_t(2 * R * 3)), at(size_t(2 * R * n_adj)), ad(size_t(2 * R * n_adj));
        std::vector<int64_t> adj_ids(size_t(2 * R * n_adj));
        std::vector<real> signs(static_cast<size_t>(R));
        for (int64_t r = 0; r < R; ++r) {
            const RayPlan& rp = rays[size_t(lo + r)];
            const SatCamera& cam = ds_->cameras[size_t(rp.image)];
            AdjacentPixels adj = sample_adjacent(rp.u, rp.v, cam.width, cam.height, rng);
            signs[size_t(r)] = real(adj.sign_x * adj.sign_y);
            double center = std::clamp(double(depth[r]), base_rays[size_t(r)].t_near,
                                       base_rays[size_t(r)].t_far);
            const std::pair<int, int> px[2] = {{adj.u1, adj.v1}, {adj.u2, adj.v2}};
            for (int a = 0; a < 2; ++a) {
                Ray nray = make_ray(cam, ds_->frame, px[a].first, px[a].second);
                PartialRay part = partial_ray(nray, center, cfg_.p_n, int(N), cfg_.partial_mode);
                RaySamples s = stratified_sample(part.ray, n_adj, rng);
                int64_t row = int64_t(a) * R + r;
                for (int k = 0; k < 3; ++k)
                    ao[size_t(row * 3 + k)] =
                        real(k == 0 ? nray.origin.x : k == 1 ? nray.origin.y : nray.origin.z);
                for (int64_t i = 0; i < n_adj; ++i) {
                    at[size_t(row * n_adj + i)] = real(s.t[size_t(i)]);
                    ad[size_t(row * n_adj + i)] = real(s.delta[size_t(i)]);
                    adj_ids[size_t(row * n_adj + i)] = rp.image;
                }
            }
        }
        Tensor adir = concat({dir_t, dir_t}, 0);          // [2R,3]
        Tensor ashift = concat({shift3, shift3}, 0);      // same image -> same q shift
        Tensor aorigin = add(Tensor::from({2 * R, 3}, ao), ashift);
        Tensor atv = Tensor::from({2 * R, int64_t(n_adj)}, at);
        Tensor apos = add(reshape(aorigin, {2 * R, 1, 3}),
                          mul(reshape(atv, {2 * R, int64_t(n_adj), 1}), reshape(adir, {2 * R, 1, 3})));
        Tensor aenc =
            masked_encode(reshape(apos, {2 * R * n_adj, 3}), pos_spec_, sched.mask_iter, gran_);
        Tensor asigma = reshape(eval_density(params_, aenc), {2 * R, int64_t(n_adj)});
        Tensor aw = render_weights(alphas(asigma, Tensor::from({2 * R, int64_t(n_adj)}, ad)));
        Tensor adepth = composite(aw, atv);  // [2R]

        Tensor p_main = add(origin, mul(reshape(depth, {R, 1}), dir_t));
        Tensor p_adj = add(aorigin, mul(reshape(adepth, {2 * R, 1}), adir));
        NormalBatch nb = explicit_normal_batch(p_main, slice(p_adj, 0, 0, R),
                                               slice(p_adj, 0, R, R), signs);
        out.planar_valid = int(nb.rows.size());
        if (!nb.rows.empty()) {
            Tensor lp = planarity_loss(nb);
            out.planar_sum = double(lp.value()) * double(nb.rows.size());
            total = add(total, mul(lp, Tensor::scalar(real(sched.lambda_planar *
                                                           double(nb.rows.size()) /
                                                           double(R_total)))));
        }
    }

    out.total = total;
    out.gm = backward(total);
    out.has_grad = true;
    return out;
}

Trainer::ChunkOut Trainer::run_ds_chunk(int64_t chunk_idx, const std::vector<int64_t>& point_idx,
                                        const ScheduleState& sched) const {
    const int64_t N = cfg_.n_samples;
    int64_t lo = chunk_idx * kChunkPoints;
    int64_t hi = std::min<int64_t>(lo + kChunkPoints, int64_t(point_idx.size()));
    const int64_t P = hi - lo;
    Rng rng(hash_stream(cfg_.seed, 0xd5c4 + uint64_t(iter_) * 0x1000, uint64_t(chunk_idx)));

    std::vector<real> o_base(size_t(P * 3)), dir_v(size_t(P * 3)), px_over_scale(static_cast<size_t>(P));
    std::vector<real> t_v(size_t(P * N)), d_v(size_t(P * N));
    std::vector<int64_t> ids(static_cast<size_t>(P)), sample_ids(size_t(P * N));
    std::vector<std::pair<double, double>> spans(static_cast<size_t>(P));
    std::vector<double> weights(static_cast<size_t>(P));
    std::vector<Vec3> X(static_cast<size_t>(P));
    for (int64_t r = 0; r < P; ++r) {
        const SparseDepthPoint& pt = ds_->sparse_points[size_t(point_idx[size_t(lo + r)])];
        const SatCamera& cam = ds_->cameras[size_t(pt.image_id)];
        Ray ray = make_ray(cam, ds_->frame, pt.u, pt.v);
        for (int k = 0; k < 3; ++k) {
            o_base[size_t(r * 3 + k)] = real(k == 0 ? ray.origin.x : k == 1 ? ray.origin.y : ray.origin.z);
            dir_v[size_t(r * 3 + k)] = real(k == 0 ? ray.dir.x : k == 1 ? ray.dir.y : ray.dir.z);
        }
        px_over_scale[size_t(r)] = real(cam.pixel_spacing / ds_->frame.scale);
        ids[size_t(r)] = pt.image_id;
        spans[size_t(r)] = {ray.t_near, ray.t_far};
        weights[size_t(r)] = pt.weight;
        X[size_t(r)] = pt.x;
        RaySamples s = stratified_sample(ray, int(N), rng);
        for (int64_t i = 0; i < N; ++i) {
            t_v[size_t(r * N + i)] = real(s.t[size_t(i)]);
            d_v[size_t(r * N + i)] = real(s.delta[size_t(i)]);
            sample_ids[size_t(r * N + i)] = pt.image_id;
        }
    }

    Tensor dir_t = Tensor::from({P, 3}, dir_v);
    Tensor q_rows = clamp(gather_rows(params_.pixel_q, ids), -5, 5);
    Tensor shift = mul(q_rows, Tensor::from({P, 1}, px_over_scale));
    Tensor origin = add(Tensor::from({P, 3}, o_base), concat({shift, Tensor::zeros({P, 1})}, 1));
    Tensor tvals = Tensor::from({P, N}, t_v);
    Tensor pos = add(reshape(origin, {P, 1, 3}), mul(reshape(tvals, {P, N, 1}), reshape(dir_t, {P, 1, 3})));
    Tensor enc = masked_encode(reshape(pos, {P * N, 3}), pos_spec_, sched.mask_iter, gran_);
    Tensor sigma = reshape(eval_density(params_, enc), {P, N});
    Tensor w = render_weights(alphas(sigma, Tensor::from({P, N}, d_v)));
    Tensor depth = composite(w, tvals);  // [P]

    // target distance from the (q-shifted) origin to the known point; the
    // origin values are treated as constants here so the gradient reaches the
    // parameters only through the rendered depth
    std::vector<double> target(static_cast<size_t>(P));
    for (int64_t r = 0; r < P; ++r) {
        Vec3 o(double(origin[r * 3]), double(origin[r * 3 + 1]), double(origin[r * 3 + 2]));
        target[size_t(r)] = (X[size_t(r)] - o).norm();
    }
    DepthSupervision dsup = depth_supervised_loss(depth, target, weights, spans);

    ChunkOut out;
    out.ds_used = dsup.used;
    out.ds_skipped = dsup.skipped;
    out.ds_sum = double(dsup.loss.value()) * double(dsup.used);
    if (dsup.used > 0) {
        Tensor total = mul(dsup.loss, Tensor::scalar(real(sched.lambda_ds * double(dsup.used) /
                                                          double(point_idx.size()))));
        out.total = total;
        out.gm = backward(total);
        out.has_grad = true;
    }
    return out;
}

std::vector<std::vector<real>> Trainer::compute_gradients(StepStats* stats) {
    ScheduleState sched = current_schedule();
    std::vector<RayPlan> rays = draw_batch();

    std::vector<int64_t> ds_points;
    if (sched.lambda_ds > 0 && !ds_->sparse_points.empty()) {
        Rng rng(hash_stream(cfg_.seed, 0xd5b41c4, uint64_t(iter_)));
        int64_t n = std::min<int64_t>(cfg_.ds_batch, int64_t(ds_->sparse_points.size()));
        for (int64_t i = 0; i < n; ++i)
            ds_points.push_back(rng.uniform_int(int64_t(ds_->sparse_points.size())));
    }

    int64_t n_ray_chunks = (int64_t(rays.size()) + kChunkRays - 1) / kChunkRays;
    int64_t n_ds_chunks =
        ds_points.empty() ? 0 : (int64_t(ds_points.size()) + kChunkPoints - 1) / kChunkPoints;
    int64_t n_items = n_ray_chunks + n_ds_chunks;

    std::vector<ChunkOut> outs(static_cast<size_t>(n_items));
    std::atomic<int64_t> next{0};
    auto worker = [&] {
        for (;;) {
            int64_t i = next.fetch_add(1);
            if (i >= n_items) return;
            outs[size_t(i)] = i < n_ray_chunks
                                  ? run_chunk(i, rays, sched)
                                  : run_ds_chunk(i - n_ray_chunks, ds_points, sched);
        }
    };
    int nt = int(std::min<int64_t>(threads_, n_items));
    if (nt <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < nt; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    // reduce in chunk order (deterministic for any worker count)
    auto plist = params_.parameters();
    std::vector<std::vector<real>> grads;
    for (Tensor* p : plist) grads.emplace_back(size_t(p->size()), real(0));
    StepStats st;
    st.uncertainty_mode = sched.uncertainty_mode;
    int total_rays = 0, total_valid = 0, total_used = 0;
    for (ChunkOut& c : outs) {
        if (c.has_grad)
            for (size_t i = 0; i < plist.size(); ++i)
                if (const std::vector<real>* g = c.gm.find(plist[i]->node()))
                    for (size_t k = 0; k < grads[i].size(); ++k) grads[i][k] += (*g)[k];
        st.loss_color += c.color_sum;
        total_rays += c.rays;
        st.loss_planar += c.planar_sum;
        total_valid += c.planar_valid;
        st.loss_ds += c.ds_sum;
        total_used += c.ds_used;
        st.ds_skipped += c.ds_skipped;
    }
    st.loss_color /= std::max(1, total_rays);
    st.planar_patches = total_valid;
    st.loss_planar = total_valid > 0 ? st.loss_planar / total_valid : 0.0;
    st.ds_used = total_used;
    st.loss_ds = total_used > 0 ? st.loss_ds / total_used : 0.0;
    st.loss_total = st.loss_color + sched.lambda_planar * st.loss_planar *
                                        (double(total_valid) / double(cfg_.batch_size)) +
                    sched.lambda_ds * st.loss_ds *
                        (ds_points.empty() ? 0.0
                                           : double(total_used) / double(ds_points.size()));
    if (!std::isfinite(st.loss_total)) {
        if (!diag_dir_.empty()) dump_diagnostics(diag_dir_, st, rays);
        throw NumericError("training diverged: non-finite loss at iteration " +
                           std::to_string(iter_));
    }
    if (stats) *stats = st;
    return grads;
}

Trainer::StepStats Trainer::step() {
    StepStats st;
    std::vector<std::vector<real>> grads = compute_gradients(&st);
    auto plist = params_.parameters();
    adam_step(plist, grads, adam_, lr_at(iter_));
    iter_++;
    return st;
}

void Trainer::dump_diagnostics(const std::string& out_dir, const StepStats& stats,
                               const std::vector<RayPlan>& rays) const {
    nlohmann::json j;
    j["iteration"] = iter_;
    j["loss_color"] = stats.loss_color;
    j["loss_planar"] = stats.loss_planar;
    j["loss_ds"] = stats.loss_ds;
    nlohmann::json batch = nlohmann::json::array();
    for (const RayPlan& r : rays) batch.push_back({{"image", r.image}, {"u", r.u}, {"v", r.v}});
    j["batch"] = batch;
    std::ofstream out(fs::path(out_dir) / "diverged_batch.json");
    if (out) out << j.dump(2) << "\n";
}

double Trainer::probe_psnr() {
    FieldParams frozen = params_.detached();
    double mse = 0;
    int64_t n = 0;
    const int64_t chunk = 256;
    for (size_t base = 0; base < probe_.size(); base += chunk) {
        size_t count = std::min<size_t>(chunk, probe_.size() - base);
        std::vector<std::pair<int, std::pair<int, int>>> px;
        for (size_t i = 0; i < count; ++i)
            px.push_back({probe_[base + i].image, {probe_[base + i].u, probe_[base + i].v}});
        // forward-only render of the probe pixels, midpoint sampling
        int64_t R = int64_t(count);
        int64_t N = cfg_.n_samples;
        std::vector<real> o(size_t(R * 3)), d(size_t(R * 3)), sun(size_t(R * 3)),
            t_v(size_t(R * N)), dl(size_t(R * N));
        std::vector<int64_t> sid(size_t(R * N));
        for (int64_t r = 0; r < R; ++r) {
            const SatCamera& cam = ds_->cameras[size_t(px[size_t(r)].first)];
            Vec2 q(std::clamp(double(frozen.pixel_q[px[size_t(r)].first * 2]), -5.0, 5.0),
                   std::clamp(double(frozen.pixel_q[px[size_t(r)].first * 2 + 1]), -5.0, 5.0));
            Ray ray = make_ray(cam, ds_->frame, px[size_t(r)].second.first,
                               px[size_t(r)].second.second, q);
            RaySamples s = midpoint_sample(ray, int(N));
            for (int k = 0; k < 3; ++k) {
                o[size_t(r * 3 + k)] = real(k == 0 ? ray.origin.x : k == 1 ? ray.origin.y : ray.origin.z);
                d[size_t(r * 3 + k)] = real(k == 0 ? ray.dir.x : k == 1 ? ray.dir.y : ray.dir.z);
                sun[size_t(r * 3 + k)] =
                    real(k == 0 ? cam.sun_dir.x : k == 1 ? cam.sun_dir.y : cam.sun_dir.z);
            }
            for (int64_t i = 0; i < N; ++i) {
                t_v[size_t(r * N + i)] = real(s.t[size_t(i)]);
                dl[size_t(r * N + i)] = real(s.delta[size_t(i)]);
                sid[size_t(r * N + i)] = px[size_t(r)].first;
            }
        }
        Tensor dir_t = Tensor::from({R, 3}, d);
        Tensor pos = add(reshape(Tensor::from({R, 3}, o), {R, 1, 3}),
                         mul(reshape(Tensor::from({R, N}, t_v), {R, N, 1}), reshape(dir_t, {R, 1, 3})));
        ScheduleState sched = current_schedule();
        Tensor enc = masked_encode(reshape(pos, {R * N, 3}), pos_spec_, sched.mask_iter, gran_);
        FieldEval e = eval_field(frozen, enc, per_sample(pos_encode(dir_t, dir_spec_), R, N),
                                 per_sample(Tensor::from({R, 3}, sun), R, N), sid);
        Tensor w = render_weights(alphas(reshape(e.sigma, {R, N}), Tensor::from({R, N}, dl)));
        Tensor c = composite(
            w, reshape(compose_color_batch(e.albedo, e.ambient, gather_rows(frozen.color_a, sid),
                                           gather_rows(frozen.color_b, sid), Tensor::scalar(1)),
                       {R, N, 3}));
        for (int64_t r = 0; r < R; ++r)
            for (int k = 0; k < 3; ++k) {
                double gt = double(gt01_[size_t(px[size_t(r)].first)].at(px[size_t(r)].second.first,
                                                                        px[size_t(r)].second.second, k));
                double diff = double(c[r * 3 + k]) - gt;
                mse += diff * diff;
                n++;
            }
    }
    mse /= double(n);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

void Trainer::train(const std::string& out_dir) {
    fs::create_directories(out_dir);
    diag_dir_ = out_dir;
    std::ofstream metrics(fs::path(out_dir) / "metrics.csv");
    if (!metrics) throw IoError("cannot write metrics.csv in " + out_dir);
    metrics << "iter,loss_total,loss_color,loss_planar,loss_ds,psnr_probe\n";
    metrics.precision(8);

    while (iter_ < cfg_.total_iterations) {
        int64_t this_iter = iter_;
        StepStats st = step();
        if (this_iter % cfg_.log_interval == 0 || iter_ == cfg_.total_iterations) {
            double p = probe_psnr();
            metrics << this_iter << "," << st.loss_total << "," << st.loss_color << ","
                    << st.loss_planar << "," << st.loss_ds << "," << p << "\n";
            metrics.flush();
        }
        if (cfg_.checkpoint_interval > 0 && iter_ % cfg_.checkpoint_interval == 0 &&
            iter_ < cfg_.total_iterations) {
            char name[64];
            std::snprintf(name, sizeof(name), "checkpoint_%08lld.bin", (long long)iter_);
            params_.save((fs::path(out_dir) / name).string());
        }
    }
    params_.save((fs::path(out_dir) / "checkpoint.bin").string());
}

// ---------------------------------------------------------- view rendering

RenderedView render_view(const FieldParams& params, const SatCamera& cam, const SceneFrame& frame,
                         const TrainConfig& cfg, int64_t t_render) {
    FieldParams frozen = params.detached();
    EncodingSpec pos_spec{cfg.arch.l_pos, true};
    EncodingSpec dir_spec{cfg.arch.l_dir, true};
    GranularitySchedule gran{cfg.granularity_T(), cfg.granularity_b(), cfg.arch.l_pos,
                             cfg.flat_mask_index};
    int64_t mask_iter = t_render < 0 ? gran.T : t_render;
    if (cam.image_id < 0 || cam.image_id >= cfg.arch.num_images)
        throw Error("render_view: camera image_id unknown to the field");

    Vec2 q(std::clamp(double(frozen.pixel_q[cam.image_id * 2]), -5.0, 5.0),
           std::clamp(double(frozen.pixel_q[cam.image_id * 2 + 1]), -5.0, 5.0));

    RenderedView out;
    out.rgb = FloatImage::make(cam.width, cam.height, 3);
    out.depth = FloatImage::make(cam.width, cam.height, 1);
    out.normal = FloatImage::make(cam.width, cam.height, 3);

    const int64_t N = cfg.n_samples;
    const int64_t rows_per_chunk = std::max<int64_t>(1, 4096 / cam.width);
    for (int64_t v0 = 0; v0 < cam.height; v0 += rows_per_chunk) {
        int64_t v1 = std::min<int64_t>(v0 + rows_per_chunk, cam.height);
        int64_t R = (v1 - v0) * cam.width;
        std::vector<real> o(size_t(R * 3)), d(size_t(R * 3)), sun(size_t(R * 3)),
            t_v(size_t(R * N)), dl(size_t(R * N));
        std::vector<int64_t> sid(size_t(R * N));
        int64_t r = 0;
        for (int64_t v = v0; v < v1; ++v)
            for (int64_t u = 0; u < cam.width; ++u, ++r) {
                Ray ray = make_ray(cam, frame, int(u), int(v), q);
                RaySamples s = midpoint_sample(ray, int(N));
                for (int k = 0; k < 3; ++k) {
                    o[size_t(r * 3 + k)] =
                        real(k == 0 ? ray.origin.x : k == 1 ? ray.origin.y : ray.origin.z);
                    d[size_t(r * 3 + k)] = real(k == 0 ? ray.dir.x : k == 1 ? ray.dir.y : ray.dir.z);
                    sun[size_t(r * 3 + k)] =
                        real(k == 0 ? cam.sun_dir.x : k == 1 ? cam.sun_dir.y : cam.sun_dir.z);
                }
                for (int64_t i = 0; i < N; ++i) {
                    t_v[size_t(r * N + i)] = real(s.t[size_t(i)]);
                    dl[size_t(r * N + i)] = real(s.delta[size_t(i)]);
                    sid[size_t(r * N + i)] = cam.image_id;
                }
            }
        Tensor dir_t = Tensor::from({R, 3}, d);
        Tensor pos = add(reshape(Tensor::from({R, 3}, o), {R, 1, 3}),
                         mul(reshape(Tensor::from({R, N}, t_v), {R, N, 1}), reshape(dir_t, {R, 1, 3})));
        Tensor enc = masked_encode(reshape(pos, {R * N, 3}), pos_spec, mask_iter, gran);
        FieldEval e = eval_field(frozen, enc, per_sample(pos_encode(dir_t, dir_spec), R, N),
                                 per_sample(Tensor::from({R, 3}, sun), R, N), sid);
        Tensor w = render_weights(alphas(reshape(e.sigma, {R, N}), Tensor::from({R, N}, dl)));
        Tensor depth = composite(w, Tensor::from({R, N}, t_v));
        Tensor c = composite(
            w, reshape(compose_color_batch(e.albedo, e.ambient, gather_rows(frozen.color_a, sid),
                                           gather_rows(frozen.color_b, sid), Tensor::scalar(1)),
                       {R, N, 3}));
        r = 0;
        for (int64_t v = v0; v < v1; ++v)
            for (int64_t u = 0; u < cam.width; ++u, ++r) {
                out.depth.at(int(u), int(v)) = float(depth[r]);
                for (int k = 0; k < 3; ++k) out.rgb.at(int(u), int(v), k) = float(c[r * 3 + k]);
            }
    }

    // explicit normals from the rendered depth map
    auto point_at = [&](int u, int v) {
        Ray ray = make_ray(cam, frame, u, v, q);
        return surface_point(ray, double(out.depth.at(u, v)));
    };
    for (int v = 0; v < cam.height; ++v)
        for (int u = 0; u < cam.width; ++u) {
            int sx = u + 1 < cam.width ? 1 : -1;
            int sy = v + 1 < cam.height ? 1 : -1;
            NormalResult nr =
                explicit_normal(point_at(u, v), point_at(u + sx, v), point_at(u, v + sy), sx, sy);
            Vec3 n = nr.degenerate ? Vec3(0, 0, 0) : nr.n;
            out.normal.at(u, v, 0) = float(n.x);
            out.normal.at(u, v, 1) = float(n.y);
            out.normal.at(u, v, 2) = float(n.z);
        }
    return out;
}

EvalReport evaluate_field(const FieldParams& params, const Dataset& ds, const TrainConfig& cfg,
                          const std::string& dsm_out_dir) {
    if (!ds.has_dsm) throw IoError("evaluate_field: dataset has no ground-truth DSM");
    if (!dsm_out_dir.empty()) fs::create_directories(dsm_out_dir);
    EvalReport rep;
    double mae_acc = 0, psnr_acc = 0;
    for (const SatCamera& cam : ds.cameras) {
        RenderedView view = render_view(params, cam, ds.frame, cfg);
        Vec2 q(std::clamp(double(params.pixel_q[cam.image_id * 2]), -5.0, 5.0),
               std::clamp(double(params.pixel_q[cam.image_id * 2 + 1]), -5.0, 5.0));
        DsmGrid pred = extract_dsm(view.depth, cam, ds.frame, ds.dsm_gt, q);
        double offset = align_dsm(pred, ds.dsm_gt);
        add_offset(pred, offset);
        ViewReport vr;
        vr.image_id = cam.image_id;
        vr.mae_m = mae(pred, ds.dsm_gt);
        vr.psnr_db = psnr(view.rgb, to_float01(ds.images[size_t(cam.image_id)]));
        rep.per_view.push_back(vr);
        mae_acc += vr.mae_m;
        psnr_acc += vr.psnr_db;
        if (!dsm_out_dir.empty()) {
            char name[64];
            std::snprintf(name, sizeof(name), "dsm_view_%03d", cam.image_id);
            save_dsm((fs::path(dsm_out_dir) / name).string(), pred);
        }
    }
    rep.mean_mae_m = mae_acc / double(rep.per_view.size());
    rep.mean_psnr_db = psnr_acc / double(rep.per_view.size());
    return rep;
}

}  // namespace satgeo
