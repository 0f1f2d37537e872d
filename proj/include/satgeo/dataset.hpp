#pragma once

#include <string>
#include <vector>

#include "satgeo/camera.hpp"
#include "satgeo/dsm.hpp"
#include "satgeo/image_io.hpp"
#include "satgeo/regularizers.hpp"
#include "satgeo/scenegen.hpp"

namespace satgeo {

struct Dataset {
    SceneFrame frame;
    DatasetSpec spec;
    std::vector<SatCamera> cameras;  // indexed by image_id (contiguous)
    std::vector<Image> images;
    std::vector<FloatImage> depth_gt;  // filled only when requested
    DsmGrid dsm_gt;
    bool has_dsm = false;
    std::vector<SparseDepthPoint> sparse_points;

    int64_t total_pixels() const;
    const SatCamera& camera_by_id(int id) const;
};

Dataset load_dataset(const std::string& dir, bool load_depth_gt = false);

}  // namespace satgeo
