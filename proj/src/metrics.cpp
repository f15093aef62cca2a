// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace voxfuse {

namespace {

void check_same_size(const Image &a, const Image &b, const char *what) {
    if (a.width != b.width || a.height != b.height) {
        throw std::invalid_argument(std::string(what) + ": images differ in size");
    }
}

std::vector<double> luma(const Image &img) {
    std::vector<double> y(img.pixel_count());
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = 0.2126 * img.rgb[3 * i] + 0.7152 * img.rgb[3 * i + 1] + 0.0722 * img.rgb[3 * i + 2];
    }
    return y;
}

constexpr int kWindow = 11;

std::vector<double> gaussian_taps() {
    std::vector<double> g(kWindow);
    double sum = 0.0;
    for (int i = 0; i < kWindow; ++i) {
        const double x = i - kWindow / 2;
        g[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
        sum += g[static_cast<std::size_t>(i)];
    }
    for (double &v : g) {
        v /= sum;
    }
    return g;
}

/// Separable valid-mode filtering: (w-10) x (h-10) output.
std::vector<double> filter_valid(const std::vector<double> &src, int w, int h, const std::vector<double> &g) {
    const int ow = w - kWindow + 1;
    const int oh = h - kWindow + 1;
    std::vector<double> tmp(static_cast<std::size_t>(ow) * h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int k = 0; k < kWindow; ++k) {
                s += g[static_cast<std::size_t>(k)] * src[static_cast<std::size_t>(y) * w + x + k];
            }
            tmp[static_cast<std::size_t>(y) * ow + x] = s;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(ow) * oh);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int k = 0; k < kWindow; ++k) {
                s += g[static_cast<std::size_t>(k)] * tmp[static_cast<std::size_t>(y + k) * ow + x];
            }
            out[static_cast<std::size_t>(y) * ow + x] = s;
        }
    }
    return out;
}

} // namespace

double psnr(const Image &a, const Image &b) {
    check_same_size(a, b, "psnr");
    if (a.rgb.empty()) {
        throw std::invalid_argument("psnr: empty images");
    }
    double se = 0.0;
    for (std::size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = a.rgb[i] - b.rgb[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.rgb.size());
    if (mse == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Image &a, const Image &b) {
    check_same_size(a, b, "ssim");
    if (a.width < kWindow || a.height < kWindow) {
        throw std::invalid_argument("ssim: images must be at least 11x11");
    }
    const int w = a.width;
    const int h = a.height;
    const std::vector<double> x = luma(a);
    const std::vector<double> y = luma(b);
    std::vector<double> xx(x.size());
    std::vector<double> yy(x.size());
    std::vector<double> xy(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const std::vector<double> g = gaussian_taps();
    const auto mx = filter_valid(x, w, h, g);
    const auto my = filter_valid(y, w, h, g);
    const auto sxx = filter_valid(xx, w, h, g);
    const auto syy = filter_valid(yy, w, h, g);
    const auto sxy = filter_valid(xy, w, h, g);
    const double c1 = 0.01 * 0.01;
    const double c2 = 0.03 * 0.03;
    double total = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i];
        const double vy = syy[i] - my[i] * my[i];
        const double cov = sxy[i] - mx[i] * my[i];
        total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    return total / static_cast<double>(mx.size());
}

DepthMetrics depth_metrics(const DepthMap &pred, const DepthMap &gt, double threshold) {
    if (pred.width != gt.width || pred.height != gt.height) {
        throw std::invalid_argument("depth_metrics: maps differ in size");
    }
    DepthMetrics m;
    double err = 0.0;
    int hits = 0;
    for (std::size_t i = 0; i < gt.depth.size(); ++i) {
        if (!pred.valid(i) || !gt.valid(i)) {
            continue;
        }
        const double d = std::abs(pred.depth[i] - gt.depth[i]);
        err += d;
        hits += d < threshold ? 1 : 0;
        ++m.valid;
    }
    if (m.valid == 0) {
        throw std::invalid_argument("depth_metrics: no pixel is valid in both maps");
    }
    m.abs_err = err / m.valid;
    m.accuracy = static_cast<double>(hits) / m.valid;
    return m;
}

} // namespace voxfuse
