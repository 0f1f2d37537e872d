#include "satgeo/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace satgeo {

namespace {
struct FileCloser {
    FILE* f;
    ~FileCloser() {
        if (f) std::fclose(f);
    }
};
}  // namespace

void save_png(const std::string& path, const Image& img) {
    if (img.width <= 0 || img.height <= 0 ||
        img.rgb.size() != size_t(img.width) * size_t(img.height) * 3)
        throw ShapeError("save_png: inconsistent image buffer");
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot write png: " + path);
    FileCloser closer{f};

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("save_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("save_png: libpng failure writing " + path);
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(size_t(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[size_t(y)] = const_cast<png_bytep>(&img.rgb[size_t(y) * size_t(img.width) * 3]);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image load_png(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open png: " + path);
    FileCloser closer{f};

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("load_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("load_png: not a valid png: " + path);
    }
    png_init_io(png, f);
    png_read_info(png, info);

    // normalize anything to 8-bit RGB
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    Image img;
    img.width = int(png_get_image_width(png, info));
    img.height = int(png_get_image_height(png, info));
    img.rgb.resize(size_t(img.width) * size_t(img.height) * 3);
    std::vector<png_bytep> rows(size_t(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[size_t(y)] = &img.rgb[size_t(y) * size_t(img.width) * 3];
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void save_pfm(const std::string& path, const FloatImage& img) {
    if (img.channels != 1 && img.channels != 3)
        throw ShapeError("save_pfm: only 1 or 3 channels supported");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write pfm: " + path);
    out << (img.channels == 3 ? "PF" : "Pf") << "\n"
        << img.width << " " << img.height << "\n"
        << "-1.0\n";
    // scanlines bottom-up
    for (int y = img.height - 1; y >= 0; --y)
        out.write(reinterpret_cast<const char*>(&img.data[size_t(y) * size_t(img.width) *
                                                          size_t(img.channels)]),
                  std::streamsize(size_t(img.width) * size_t(img.channels) * sizeof(float)));
    if (!out) throw IoError("failed writing pfm: " + path);
}

FloatImage load_pfm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open pfm: " + path);
    std::string magic;
    in >> magic;
    if (magic != "PF" && magic != "Pf") throw IoError("load_pfm: bad magic in " + path);
    FloatImage img;
    img.channels = magic == "PF" ? 3 : 1;
    double scale;
    in >> img.width >> img.height >> scale;
    if (!in || img.width <= 0 || img.height <= 0) throw IoError("load_pfm: bad header in " + path);
    if (scale >= 0) throw IoError("load_pfm: big-endian pfm not supported: " + path);
    in.get();  // single whitespace after the header
    img.data.resize(size_t(img.width) * size_t(img.height) * size_t(img.channels));
    for (int y = img.height - 1; y >= 0; --y)
        in.read(reinterpret_cast<char*>(&img.data[size_t(y) * size_t(img.width) *
                                                  size_t(img.channels)]),
                std::streamsize(size_t(img.width) * size_t(img.channels) * sizeof(float)));
    if (!in) throw IoError("load_pfm: truncated data in " + path);
    return img;
}

Image quantize8(const FloatImage& rgb01) {
    if (rgb01.channels != 3) throw ShapeError("quantize8: expected 3 channels");
    Image img;
    img.width = rgb01.width;
    img.height = rgb01.height;
    img.rgb.resize(size_t(img.width) * size_t(img.height) * 3);
    for (size_t i = 0; i < img.rgb.size(); ++i) {
        float v = std::clamp(rgb01.data[i], 0.f, 1.f);
        img.rgb[i] = uint8_t(std::lround(v * 255.f));
    }
    return img;
}

FloatImage to_float01(const Image& img) {
    FloatImage out = FloatImage::make(img.width, img.height, 3);
    for (size_t i = 0; i < img.rgb.size(); ++i) out.data[i] = float(img.rgb[i]) / 255.f;
    return out;
}

}  // namespace satgeo
