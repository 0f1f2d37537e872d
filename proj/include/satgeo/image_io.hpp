#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "satgeo/common.hpp"

namespace satgeo {

// 8-bit RGB, row-major, top-down.
struct Image {
    int width = 0, height = 0;
    std::vector<uint8_t> rgb;

    uint8_t& at(int x, int y, int c) { return rgb[size_t((y * width + x) * 3 + c)]; }
    uint8_t at(int x, int y, int c) const { return rgb[size_t((y * width + x) * 3 + c)]; }
};

// 32-bit float image, 1 or 3 channels, row-major, top-down in memory.
// On disk (PFM) scanlines are bottom-up with scale -1.0 (little-endian).
struct FloatImage {
    int width = 0, height = 0, channels = 1;
    std::vector<float> data;

    static FloatImage make(int w, int h, int c, float fill = 0.f) {
        FloatImage im;
        im.width = w;
        im.height = h;
        im.channels = c;
        im.data.assign(size_t(w) * size_t(h) * size_t(c), fill);
        return im;
    }
    float& at(int x, int y, int c = 0) { return data[size_t((y * width + x) * channels + c)]; }
    float at(int x, int y, int c = 0) const { return data[size_t((y * width + x) * channels + c)]; }
};

void save_png(const std::string& path, const Image& img);
Image load_png(const std::string& path);

void save_pfm(const std::string& path, const FloatImage& img);
FloatImage load_pfm(const std::string& path);

// [0,1] float RGB -> 8-bit (round, clamp) and back.
Image quantize8(const FloatImage& rgb01);
FloatImage to_float01(const Image& img);

}  // namespace satgeo
