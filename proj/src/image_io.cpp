#include "ssg/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <vector>

#include "ssg/error.hpp"

namespace ssg::image_io {
namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png_bytes(const std::vector<std::uint8_t>& bytes, std::uint32_t h, std::uint32_t w,
                     std::uint32_t channels, const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing PNG " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, w, h, 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::uint32_t i = 0; i < h; ++i)
        png_write_row(png, const_cast<png_bytep>(bytes.data() + std::size_t{i} * w * channels));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

std::uint8_t quantize(float v) {
    const double scaled = std::floor(std::clamp(double{v}, 0.0, 1.0) * 255.0 + 0.5);
    return static_cast<std::uint8_t>(scaled);
}

prompting::Image read_png(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot open " + path);
    png_byte sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw IoError(path + " is not a PNG file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialisation failed");
    }
    std::vector<std::uint8_t> bytes;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed decoding PNG " + path);
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const auto color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const std::uint32_t w = png_get_image_width(png, info);
    const std::uint32_t h = png_get_image_height(png, info);
    const std::uint32_t channels = png_get_channels(png, info);
    bytes.resize(std::size_t{h} * w * channels);
    for (std::uint32_t i = 0; i < h; ++i) png_read_row(png, bytes.data() + std::size_t{i} * w * channels, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    if (channels != 1 && channels != 3)
        throw IoError(path + ": unsupported channel count " + std::to_string(channels));
    prompting::Image img(h, w, channels);
    for (std::size_t k = 0; k < bytes.size(); ++k) img.values[k] = static_cast<float>(bytes[k] / 255.0);
    return img;
}

void write_png(const prompting::Image& img, const std::string& path) {
    prompting::validate(img);
    std::vector<std::uint8_t> bytes(img.values.size());
    std::transform(img.values.begin(), img.values.end(), bytes.begin(), quantize);
    write_png_bytes(bytes, img.h, img.w, img.channels, path);
}

void write_heatmap_png(std::span<const float> values, std::uint32_t h, std::uint32_t w, float lo,
                       float hi, const std::string& path) {
    if (values.size() != std::size_t{h} * w) throw ValidationError("heatmap: size mismatch");
    const double range = double{hi} - lo;
    std::vector<std::uint8_t> bytes(values.size());
    for (std::size_t k = 0; k < values.size(); ++k) {
        const double v = range > 0.0 ? (values[k] - lo) / range : 0.5;
        bytes[k] = quantize(static_cast<float>(v));
    }
    write_png_bytes(bytes, h, w, 1, path);
}

void write_raw_f32(std::span<const float> values, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace ssg::image_io
