#include "satgeo/dsm.hpp"

#include <fstream>
#include <limits>

#include <json.hpp>

#include "satgeo/image_io.hpp"

namespace satgeo {

DsmGrid DsmGrid::make(const Vec2& origin, double resolution, int width, int height) {
    DsmGrid g;
    g.origin = origin;
    g.resolution = resolution;
    g.width = width;
    g.height = height;
    g.alt.assign(size_t(width) * size_t(height), std::numeric_limits<double>::quiet_NaN());
    g.validate();
    return g;
}

bool DsmGrid::same_geometry(const DsmGrid& o) const {
    return width == o.width && height == o.height && resolution == o.resolution &&
           std::abs(origin.x - o.origin.x) < 1e-9 && std::abs(origin.y - o.origin.y) < 1e-9;
}

void DsmGrid::validate() const {
    if (!(resolution > 0)) throw ConfigError("DsmGrid: resolution must be positive");
    if (width < 1 || height < 1) throw ConfigError("DsmGrid: empty grid");
    if (alt.size() != size_t(width) * size_t(height))
        throw ShapeError("DsmGrid: altitude buffer does not match grid size");
}

void save_dsm(const std::string& base, const DsmGrid& g) {
    g.validate();
    FloatImage im = FloatImage::make(g.width, g.height, 1);
    for (size_t i = 0; i < g.alt.size(); ++i) im.data[i] = float(g.alt[i]);
    save_pfm(base + ".pfm", im);
    nlohmann::json j;
    j["origin_m"] = {g.origin.x, g.origin.y};
    j["resolution_m"] = g.resolution;
    std::ofstream out(base + ".json");
    if (!out) throw IoError("cannot write dsm sidecar: " + base + ".json");
    out << j.dump(2) << "\n";
}

DsmGrid load_dsm(const std::string& base) {
    FloatImage im = load_pfm(base + ".pfm");
    if (im.channels != 1) throw IoError("load_dsm: expected single-channel pfm: " + base);
    std::ifstream in(base + ".json");
    if (!in) throw IoError("cannot open dsm sidecar: " + base + ".json");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, true, true);
    DsmGrid g;
    g.origin = Vec2(j.at("origin_m").at(0), j.at("origin_m").at(1));
    g.resolution = j.at("resolution_m");
    g.width = im.width;
    g.height = im.height;
    g.alt.resize(im.data.size());
    for (size_t i = 0; i < im.data.size(); ++i) g.alt[i] = double(im.data[i]);
    g.validate();
    return g;
}

}  // namespace satgeo
