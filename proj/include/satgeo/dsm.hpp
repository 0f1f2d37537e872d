#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "satgeo/common.hpp"

namespace satgeo {

// Regular altitude raster in scene (UTM-like) coordinates. Nodata cells are
// NaN in memory and on disk; they never enter statistics.
struct DsmGrid {
    Vec2 origin;             // meters, lower corner of cell (0, 0)
    double resolution = 1;   // meters per cell
    int width = 0, height = 0;
    std::vector<double> alt;  // row-major [height][width]

    static DsmGrid make(const Vec2& origin, double resolution, int width, int height);
    double& at(int col, int row) { return alt[size_t(row) * size_t(width) + size_t(col)]; }
    double at(int col, int row) const { return alt[size_t(row) * size_t(width) + size_t(col)]; }
    bool valid(int col, int row) const { return std::isfinite(at(col, row)); }
    bool same_geometry(const DsmGrid& o) const;
    void validate() const;
};

// PFM raster plus JSON sidecar {origin_m, resolution_m}. `base` is the path
// without extension; writes base.pfm and base.json.
void save_dsm(const std::string& base, const DsmGrid& g);
DsmGrid load_dsm(const std::string& base);

}  // namespace satgeo
