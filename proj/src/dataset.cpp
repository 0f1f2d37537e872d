#include "satgeo/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace satgeo {

int64_t Dataset::total_pixels() const {
    int64_t n = 0;
    for (const SatCamera& c : cameras) n += int64_t(c.width) * c.height;
    return n;
}

const SatCamera& Dataset::camera_by_id(int id) const {
    if (id < 0 || id >= int(cameras.size()))
        throw Error("camera_by_id: unknown image_id " + std::to_string(id));
    return cameras[size_t(id)];
}

Dataset load_dataset(const std::string& dir, bool load_depth_gt) {
    fs::path root(dir);
    if (!fs::exists(root / "scene.json")) throw IoError("not a dataset directory: " + dir);

    Dataset ds;
    {
        std::ifstream in(root / "scene.json");
        nlohmann::json j = nlohmann::json::parse(in, nullptr, true, true);
        const auto& fr = j.at("frame");
        ds.frame.origin_utm =
            Vec3(fr.at("origin_utm").at(0), fr.at("origin_utm").at(1), fr.at("origin_utm").at(2));
        ds.frame.scale = fr.at("scale_m");
        ds.frame.validate();
        ds.spec = dataset_spec_from_json(j.at("dataset_spec").dump());
    }

    std::vector<fs::path> cam_files;
    for (const auto& e : fs::directory_iterator(root / "cameras"))
        if (e.path().extension() == ".json") cam_files.push_back(e.path());
    std::sort(cam_files.begin(), cam_files.end());
    if (cam_files.empty()) throw IoError("dataset has no cameras: " + dir);
    for (const auto& f : cam_files) ds.cameras.push_back(load_camera(f.string()));
    std::sort(ds.cameras.begin(), ds.cameras.end(),
              [](const SatCamera& a, const SatCamera& b) { return a.image_id < b.image_id; });
    for (size_t i = 0; i < ds.cameras.size(); ++i)
        if (ds.cameras[i].image_id != int(i))
            throw ConfigError("dataset cameras must have contiguous image ids starting at 0");

    char name[64];
    for (size_t i = 0; i < ds.cameras.size(); ++i) {
        std::snprintf(name, sizeof(name), "img_%03zu.png", i);
        Image im = load_png((root / "images" / name).string());
        if (im.width != ds.cameras[i].width || im.height != ds.cameras[i].height)
            throw ConfigError("image " + std::string(name) + " does not match its camera size");
        ds.images.push_back(std::move(im));
        if (load_depth_gt) {
            std::snprintf(name, sizeof(name), "depth_%03zu.pfm", i);
            ds.depth_gt.push_back(load_pfm((root / "depth_gt" / name).string()));
        }
    }

    if (fs::exists(root / "dsm_gt.pfm")) {
        ds.dsm_gt = load_dsm((root / "dsm_gt").string());
        ds.has_dsm = true;
    }
    if (fs::exists(root / "sparse_points.csv"))
        ds.sparse_points = load_sparse_points_csv((root / "sparse_points.csv").string(), ds.frame);

    // cheap sanity: corner rays of every camera stay inside the scene box
    for (const SatCamera& cam : ds.cameras)
        for (int cu : {0, cam.width - 1})
            for (int cv : {0, cam.height - 1})
                if (!ray_inside_box(make_ray(cam, ds.frame, cu, cv)))
                    throw ConfigError("dataset camera " + std::to_string(cam.image_id) +
                                      ": rays leave the normalized scene box");
    return ds;
}

}  // namespace satgeo
