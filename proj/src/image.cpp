// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/image.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace voxfuse {

Image::Image(int w, int h, std::array<double, 3> fill) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3) {
    if (w < 0 || h < 0) {
        throw std::invalid_argument("Image: negative dimension");
    }
    for (std::size_t i = 0; i < pixel_count(); ++i) {
        rgb[i * 3 + 0] = fill[0];
        rgb[i * 3 + 1] = fill[1];
        rgb[i * 3 + 2] = fill[2];
    }
}

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

struct FileCloser {
    void operator()(std::FILE *f) const {
        if (f != nullptr) {
            std::fclose(f);
        }
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

} // namespace

Image quantize_8bit(const Image &img) {
    Image out = img;
    for (double &v : out.rgb) {
        v = to_byte(v) / 255.0;
    }
    return out;
}

void write_png(const std::filesystem::path &path, const Image &img) {
    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed for '" + path.string() + "'");
    }
    std::vector<std::uint8_t> bytes(img.pixel_count() * 3);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        bytes[i] = to_byte(img.rgb[i]);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing PNG '" + path.string() + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    // No timestamp chunk: identical images produce identical files.
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y) {
        png_write_row(png, bytes.data() + static_cast<std::size_t>(y) * img.width * 3);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path &path) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    std::uint8_t sig[8] = {};
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw IoError("'" + path.string() + "' is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialisation failed for '" + path.string() + "'");
    }
    Image img;
    std::vector<std::uint8_t> bytes;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("corrupt PNG '" + path.string() + "'");
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    if (png_get_rowbytes(png, info) != static_cast<std::size_t>(w) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unsupported PNG layout in '" + path.string() + "'");
    }
    bytes.resize(static_cast<std::size_t>(w) * h * 3);
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) {
        rows[static_cast<std::size_t>(y)] = bytes.data() + static_cast<std::size_t>(y) * w * 3;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    img = Image(w, h);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        img.rgb[i] = bytes[i] / 255.0;
    }
    return img;
}

void write_pfm(const std::filesystem::path &path, const DepthMap &depth) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out << "Pf\n" << depth.width << " " << depth.height << "\n-1.0\n";
    // PFM rows run bottom to top.
    for (int y = depth.height - 1; y >= 0; --y) {
        for (int x = 0; x < depth.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * depth.width + x;
            const float v = depth.valid(i) ? static_cast<float>(depth.depth[i]) : 0.0f;
            std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
            char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                         static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
            out.write(b, 4);
        }
    }
    if (!out) {
        throw IoError("failed writing '" + path.string() + "'");
    }
}

DepthMap read_pfm(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    std::string magic;
    int w = 0;
    int h = 0;
    double scale = 0.0;
    in >> magic >> w >> h >> scale;
    in.get();
    if (magic != "Pf" || w <= 0 || h <= 0 || scale >= 0.0) {
        throw IoError("'" + path.string() + "' is not a little-endian single-channel PFM");
    }
    DepthMap d(w, h);
    for (int y = h - 1; y >= 0; --y) {
        for (int x = 0; x < w; ++x) {
            unsigned char b[4];
            if (!in.read(reinterpret_cast<char *>(b), 4)) {
                throw IoError("truncated PFM '" + path.string() + "'");
            }
            const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
            const float v = std::bit_cast<float>(bits);
            d.at(x, y) = v > 0.0f ? static_cast<double>(v) : std::nan("");
        }
    }
    return d;
}

} // namespace voxfuse
