// satgeo: synthetic satellite scenes, geometry-regularized radiance-field
// training, and DSM evaluation in one binary.
//
// Exit codes: 0 success, 1 validation error, 2 missing input, 3 numeric
// failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "satgeo/dataset.hpp"
#include "satgeo/evaluation.hpp"
#include "satgeo/scenegen.hpp"
#include "satgeo/training.hpp"

namespace fs = std::filesystem;
using namespace satgeo;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open file: " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Desk-scale architecture and schedule; flags still override.
TrainConfig toy_train_config() {
    TrainConfig c;
    c.arch.backbone_layers = 2;
    c.arch.backbone_width = 32;
    c.arch.proj_width = 16;
    c.arch.embed_dim = 4;
    c.arch.l_pos = 6;
    c.arch.l_dir = 4;
    c.total_iterations = 20000;
    c.batch_size = 256;
    c.n_samples = 64;
    return c;
}

void write_manifest(const std::string& out_dir, const TrainConfig& cfg, const std::string& dataset) {
    nlohmann::json j;
    j["config"] = nlohmann::json::parse(train_config_to_json(cfg));
    j["version"] = kVersion;
    j["seed"] = cfg.seed;
    j["dataset"] = fs::absolute(dataset).string();
    j["out_dir"] = fs::absolute(out_dir).string();
    j["created_unix"] = int64_t(std::time(nullptr));
    std::ofstream out(fs::path(out_dir) / "manifest.json");
    if (!out) throw IoError("cannot write manifest.json in " + out_dir);
    out << j.dump(2) << "\n";
}

TrainConfig config_for_checkpoint(const std::string& checkpoint, const std::string& config_path) {
    if (!config_path.empty()) return train_config_from_json(read_file(config_path));
    fs::path manifest = fs::path(checkpoint).parent_path() / "manifest.json";
    if (fs::exists(manifest)) return train_config_from_json(read_file(manifest.string()));
    throw IoError("no --config given and no manifest.json next to " + checkpoint);
}

Image colorize_normals(const FloatImage& normal) {
    FloatImage vis = FloatImage::make(normal.width, normal.height, 3);
    for (size_t i = 0; i < normal.data.size(); ++i)
        vis.data[i] = 0.5f * (normal.data[i] + 1.f);  // up maps to blue-ish (0.5, 0.5, 1)
    return quantize8(vis);
}

int run(int argc, char** argv) {
    CLI::App app{"geometry-regularized radiance fields for satellite-style imagery"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    // ---- gen ----
    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    std::string gen_preset, gen_spec_path, gen_out;
    uint64_t gen_seed = 0;
    bool gen_force = false;
    gen->add_option("--preset", gen_preset, "built-in dataset preset (toy-jax)");
    gen->add_option("--spec", gen_spec_path, "dataset spec JSON file");
    gen->add_option("--seed", gen_seed, "override the spec seed");
    gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");
    gen->add_option("out", gen_out, "output directory")->required();

    // ---- train ----
    auto* train = app.add_subcommand("train", "train a field on a dataset");
    std::string tr_dataset, tr_out, tr_config, tr_preset;
    bool no_planarity = false, no_granularity = false, no_depth_sup = false;
    double tr_pn = -1, tr_lr = -1;
    int64_t tr_iters = -1, tr_seed = -1, tr_log = -1;
    int tr_batch = -1, tr_samples = -1, tr_threads = -1;
    train->add_option("--dataset", tr_dataset, "dataset directory")->required();
    train->add_option("--out", tr_out, "output directory")->required();
    train->add_option("--config", tr_config, "training config JSON (or a run manifest)");
    train->add_option("--preset", tr_preset, "config preset: toy");
    train->add_flag("--no-planarity", no_planarity, "disable gravity-aligned planarity");
    train->add_flag("--no-granularity", no_granularity, "disable coarse-to-fine masking");
    train->add_flag("--no-depth-sup", no_depth_sup, "disable sparse-depth supervision");
    train->add_option("--p-n", tr_pn, "partial adjacent-ray fraction (0,1]");
    train->add_option("--seed", tr_seed, "training seed");
    train->add_option("--iters", tr_iters, "total iterations");
    train->add_option("--batch", tr_batch, "rays per batch");
    train->add_option("--samples", tr_samples, "samples per ray");
    train->add_option("--lr", tr_lr, "learning rate");
    train->add_option("--log-interval", tr_log, "metrics logging interval");
    train->add_option("--threads", tr_threads, "worker threads (SATGEO_THREADS caps)");

    // ---- render ----
    auto* render = app.add_subcommand("render", "render a view from a checkpoint");
    std::string re_ckpt, re_dataset, re_out, re_config;
    int re_image = 0;
    render->add_option("--checkpoint", re_ckpt, "checkpoint file")->required();
    render->add_option("--dataset", re_dataset, "dataset directory")->required();
    render->add_option("--image-id", re_image, "camera/image id")->required();
    render->add_option("--config", re_config, "config JSON (default: manifest next to checkpoint)");
    render->add_option("--out", re_out, "output directory")->required();

    // ---- eval ----
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (per-view DSM, MAE, PSNR)");
    std::string ev_ckpt, ev_dataset, ev_out, ev_config;
    eval->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    eval->add_option("--dataset", ev_dataset, "dataset directory")->required();
    eval->add_option("--config", ev_config, "config JSON (default: manifest next to checkpoint)");
    eval->add_option("--out", ev_out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        DatasetSpec spec;
        if (!gen_preset.empty() && !gen_spec_path.empty())
            throw ConfigError("give either --preset or --spec, not both");
        if (!gen_preset.empty()) {
            if (gen_preset != "toy-jax") throw ConfigError("unknown preset: " + gen_preset);
            spec = toy_jax_preset();
        } else if (!gen_spec_path.empty()) {
            spec = dataset_spec_from_json(read_file(gen_spec_path));
        } else {
            throw ConfigError("gen requires --preset or --spec");
        }
        if (gen->count("--seed")) spec.seed = gen_seed;
        generate_dataset(spec, gen_out, gen_force);
        std::cout << "dataset written to " << gen_out << "\n";
        return 0;
    }

    if (train->parsed()) {
        TrainConfig cfg;
        if (!tr_config.empty() && !tr_preset.empty())
            throw ConfigError("give either --config or --preset, not both");
        if (!tr_config.empty())
            cfg = train_config_from_json(read_file(tr_config));
        else if (tr_preset == "toy")
            cfg = toy_train_config();
        else if (!tr_preset.empty())
            throw ConfigError("unknown train preset: " + tr_preset);
        if (no_planarity) cfg.enable_planarity = false;
        if (no_granularity) cfg.enable_granularity = false;
        if (no_depth_sup) cfg.enable_ds = false;
        if (tr_pn > 0) cfg.p_n = tr_pn;
        if (tr_seed >= 0) cfg.seed = uint64_t(tr_seed);
        if (tr_iters > 0) cfg.total_iterations = tr_iters;
        if (tr_batch > 0) cfg.batch_size = tr_batch;
        if (tr_samples > 0) cfg.n_samples = tr_samples;
        if (tr_lr > 0) cfg.learning_rate = tr_lr;
        if (tr_log > 0) cfg.log_interval = tr_log;
        if (tr_threads > 0) cfg.threads = tr_threads;

        Dataset ds = load_dataset(tr_dataset);
        cfg.arch.num_images = int(ds.cameras.size());
        cfg.validate();
        fs::create_directories(tr_out);
        write_manifest(tr_out, cfg, tr_dataset);
        Trainer trainer(cfg, ds);
        trainer.train(tr_out);
        std::cout << "checkpoint written to " << (fs::path(tr_out) / "checkpoint.bin").string()
                  << "\n";
        return 0;
    }

    if (render->parsed()) {
        Dataset ds = load_dataset(re_dataset);
        TrainConfig cfg = config_for_checkpoint(re_ckpt, re_config);
        cfg.arch.num_images = int(ds.cameras.size());
        FieldParams params = FieldParams::load(re_ckpt, cfg.arch);
        RenderedView view = render_view(params, ds.camera_by_id(re_image), ds.frame, cfg);
        fs::create_directories(re_out);
        char suffix[32];
        std::snprintf(suffix, sizeof(suffix), "%03d", re_image);
        save_png((fs::path(re_out) / ("view_" + std::string(suffix) + ".png")).string(),
                 quantize8(view.rgb));
        save_pfm((fs::path(re_out) / ("depth_" + std::string(suffix) + ".pfm")).string(),
                 view.depth);
        save_pfm((fs::path(re_out) / ("normal_" + std::string(suffix) + ".pfm")).string(),
                 view.normal);
        save_png((fs::path(re_out) / ("normal_" + std::string(suffix) + ".png")).string(),
                 colorize_normals(view.normal));
        std::cout << "rendered view " << re_image << " to " << re_out << "\n";
        return 0;
    }

    if (eval->parsed()) {
        Dataset ds = load_dataset(ev_dataset);
        TrainConfig cfg = config_for_checkpoint(ev_ckpt, ev_config);
        cfg.arch.num_images = int(ds.cameras.size());
        FieldParams params = FieldParams::load(ev_ckpt, cfg.arch);
        fs::create_directories(ev_out);
        EvalReport rep = evaluate_field(params, ds, cfg, ev_out);
        save_eval_report((fs::path(ev_out) / "report.json").string(), rep);
        std::cout << eval_report_to_json(rep) << "\n";
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "missing input: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
