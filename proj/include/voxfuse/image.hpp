// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxfuse {

/// H x W x 3 colors in [0,1], row-major from the top-left pixel.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> rgb;

    Image() = default;
    Image(int w, int h, std::array<double, 3> fill = {0.0, 0.0, 0.0});

    double &at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

    bool operator==(const Image &) const = default;
};

/// Per-pixel distance along the viewing ray in meters. Pixels with no
/// surface (or no valid estimate) hold NaN.
struct DepthMap {
    int width = 0;
    int height = 0;
    std::vector<double> depth;

    DepthMap() = default;
    DepthMap(int w, int h) : width(w), height(h), depth(static_cast<std::size_t>(w) * h, std::nan("")) {}

    double &at(int x, int y) { return depth[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return depth[static_cast<std::size_t>(y) * width + x]; }
    bool valid(std::size_t i) const { return std::isfinite(depth[i]) && depth[i] > 0.0; }
};

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Rounds every channel to the nearest k/255.
Image quantize_8bit(const Image &img);

/// 8-bit RGB PNG. Values are clamped to [0,1] and rounded on write.
void write_png(const std::filesystem::path &path, const Image &img);
Image read_png(const std::filesystem::path &path);

/// Single-channel little-endian PFM; invalid pixels are stored as 0.
void write_pfm(const std::filesystem::path &path, const DepthMap &depth);
DepthMap read_pfm(const std::filesystem::path &path);

} // namespace voxfuse
