#pragma once

#include <string>
#include <vector>

#include "satgeo/dataset.hpp"
#include "satgeo/encoding.hpp"
#include "satgeo/evaluation.hpp"
#include "satgeo/field.hpp"
#include "satgeo/regularizers.hpp"
#include "satgeo/rendering.hpp"

namespace satgeo {

struct TrainConfig {
    int64_t total_iterations = 20000;
    int batch_size = 256;  // rays
    double learning_rate = 5e-4;
    std::string lr_schedule = "constant";  // or "cosine"
    int n_samples = 64;                    // per main ray
    double p_n = 0.5;                      // partial adjacent-ray fraction
    PartialRayMode partial_mode = PartialRayMode::kCentered;

    double lambda_planar = 0.1;
    double lambda_ds = 1000.0;
    double ds_fraction = 0.25;
    double granularity_fraction = 0.10;  // T = floor(fraction * total_iterations)
    double granularity_bias = -1;        // < 0 resolves to l_pos / 2
    bool enable_planarity = true;
    bool enable_granularity = true;
    bool enable_ds = true;
    bool flat_mask_index = false;

    bool enable_shading = false;  // transmittance-based sun shading
    int shading_samples = 16;

    FieldArch arch;  // num_images is filled from the dataset

    uint64_t seed = 1;
    int64_t log_interval = 250;
    int64_t checkpoint_interval = 0;  // 0 = final only
    int psnr_probe_rays = 512;
    int ds_batch = 128;  // sparse points per iteration
    int threads = 0;     // 0 = auto; SATGEO_THREADS caps the count

    void validate() const;
    int64_t granularity_T() const;
    double granularity_b() const;
};

std::string train_config_to_json(const TrainConfig& cfg);
// Accepts either a bare config object or a run manifest (object with a
// "config" key), so a manifest reproduces its run.
TrainConfig train_config_from_json(const std::string& text);

// ---- Adam ------------------------------------------------------------------

struct AdamState {
    std::vector<std::vector<double>> m, v;
    int64_t t = 0;
};
AdamState adam_init(const std::vector<Tensor*>& params);
// Standard bias-corrected update; beta1=0.9, beta2=0.999, eps=1e-8.
void adam_step(std::vector<Tensor*>& params, const std::vector<std::vector<real>>& grads,
               AdamState& state, double lr);

// ---- training loop ---------------------------------------------------------

class Trainer {
  public:
    Trainer(TrainConfig cfg, const Dataset& ds);

    struct StepStats {
        double loss_total = 0;
        double loss_color = 0;  // photometric term (uncertainty loss after the switch)
        double loss_planar = 0;
        double loss_ds = 0;
        int planar_patches = 0;
        int ds_used = 0, ds_skipped = 0;
        bool uncertainty_mode = false;
    };

    StepStats step();
    // Gradients the next step would apply, without applying them.
    std::vector<std::vector<real>> compute_gradients(StepStats* stats = nullptr);

    // Full loop: metrics.csv, periodic + final checkpoint under out_dir.
    void train(const std::string& out_dir);

    int64_t iteration() const { return iter_; }
    int epoch() const { return int(iter_ / sched_cfg_.iters_per_epoch) + 1; }
    void resume_at(int64_t iter);
    ScheduleState current_schedule() const;
    const ScheduleConfig& schedule_config() const { return sched_cfg_; }
    FieldParams& params() { return params_; }
    const TrainConfig& config() const { return cfg_; }

    double probe_psnr();

  private:
    struct RayPlan;
    struct ChunkOut;
    ChunkOut run_chunk(int64_t chunk_idx, const std::vector<RayPlan>& rays,
                       const ScheduleState& sched) const;
    ChunkOut run_ds_chunk(int64_t chunk_idx, const std::vector<int64_t>& point_idx,
                          const ScheduleState& sched) const;
    void dump_diagnostics(const std::string& out_dir, const StepStats& stats,
                          const std::vector<RayPlan>& rays) const;
    std::vector<RayPlan> draw_batch() const;
    double lr_at(int64_t iter) const;

    TrainConfig cfg_;
    const Dataset* ds_;
    FieldParams params_;
    AdamState adam_;
    ScheduleConfig sched_cfg_;
    GranularitySchedule gran_;
    EncodingSpec pos_spec_, dir_spec_;
    int64_t iter_ = 0;
    int threads_ = 1;
    std::vector<FloatImage> gt01_;
    std::string diag_dir_;
    struct PixelRef {
        int image = 0, u = 0, v = 0;
    };
    std::vector<PixelRef> probe_;
};

// Worker-count resolution: explicit > SATGEO_THREADS cap > hardware.
int resolve_threads(int requested);

// ---- rendering / evaluation of a trained field -----------------------------

struct RenderedView {
    FloatImage rgb;     // [0,1], 3 channels
    FloatImage depth;   // ray parameter t (normalized units)
    FloatImage normal;  // explicit normals from rendered depth
};

// Deterministic full-frame render (midpoint sampling). t_render < 0 renders
// with the granularity mask fully open.
RenderedView render_view(const FieldParams& params, const SatCamera& cam, const SceneFrame& frame,
                         const TrainConfig& cfg, int64_t t_render = -1);

// Per-view DSM + MAE + PSNR against the dataset ground truth. When
// dsm_out_dir is non-empty the per-view DSMs are written there.
EvalReport evaluate_field(const FieldParams& params, const Dataset& ds, const TrainConfig& cfg,
                          const std::string& dsm_out_dir = "");

}  // namespace satgeo
