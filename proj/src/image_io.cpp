#include "cdiff/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <vector>

#include "cdiff/errors.hpp"

namespace cdiff {
namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw IoError("cannot open '" + path.string() + "'");
    return f;
}

void write_png(const std::filesystem::path& path, const std::vector<uint8_t>& pixels,
               int64_t height, int64_t width, int channels) {
    auto file = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialization failed for '" + path.string() + "'");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to write PNG '" + path.string() + "'");
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int64_t y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(pixels.data() + y * width * channels));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Returns interleaved 8-bit pixels with `channels` channels.
std::vector<uint8_t> read_png(const std::filesystem::path& path, int channels, int64_t& height,
                              int64_t& width) {
    auto file = open_file(path, "rb");
    png_byte header[8];
    if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8))
        throw IoError("'" + path.string() + "' is not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialization failed for '" + path.string() + "'");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to read PNG '" + path.string() + "'");
    }
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (channels == 3 && (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA))
        png_set_gray_to_rgb(png);
    if (channels == 1 && (color & PNG_COLOR_MASK_COLOR)) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);
    height = png_get_image_height(png, info);
    width = png_get_image_width(png, info);
    if (png_get_channels(png, info) != channels) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unexpected channel layout in '" + path.string() + "'");
    }
    std::vector<uint8_t> pixels(height * width * channels);
    std::vector<png_bytep> rows(height);
    for (int64_t y = 0; y < height; ++y) rows[y] = pixels.data() + y * width * channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return pixels;
}

uint8_t to_byte(float v) {
    const float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
    return static_cast<uint8_t>(std::lround(c * 255.f));
}

} // namespace

void write_png_rgb(const std::filesystem::path& path, const torch::Tensor& image) {
    if (image.dim() != 3 || image.size(0) != 3)
        throw ValidationError("write_png_rgb expects a [3, H, W] tensor");
    auto img = image.to(torch::kFloat32).contiguous();
    const int64_t h = img.size(1), w = img.size(2);
    auto acc = img.accessor<float, 3>();
    std::vector<uint8_t> px(h * w * 3);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch) px[(y * w + x) * 3 + ch] = to_byte(acc[ch][y][x]);
    write_png(path, px, h, w, 3);
}

torch::Tensor read_png_rgb(const std::filesystem::path& path) {
    int64_t h = 0, w = 0;
    auto px = read_png(path, 3, h, w);
    auto bytes = torch::from_blob(px.data(), {h, w, 3}, torch::kUInt8).clone();
    return bytes.permute({2, 0, 1}).contiguous().to(torch::kFloat32) / 255.0;
}

void write_png_gray(const std::filesystem::path& path, const torch::Tensor& plane) {
    if (plane.dim() != 2) throw ValidationError("write_png_gray expects an [H, W] tensor");
    auto p = plane.to(torch::kFloat32).contiguous();
    const int64_t h = p.size(0), w = p.size(1);
    auto acc = p.accessor<float, 2>();
    std::vector<uint8_t> px(h * w);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) px[y * w + x] = to_byte(acc[y][x]);
    write_png(path, px, h, w, 1);
}

torch::Tensor read_png_gray(const std::filesystem::path& path) {
    int64_t h = 0, w = 0;
    auto px = read_png(path, 1, h, w);
    return torch::from_blob(px.data(), {h, w}, torch::kUInt8).clone().to(torch::kFloat32) / 255.0;
}

} // namespace cdiff
