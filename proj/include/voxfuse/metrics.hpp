// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/image.hpp"

namespace voxfuse {

/// 10 log10(1 / MSE) over all channels; +infinity for identical images.
double psnr(const Image &a, const Image &b);

/// Single-scale SSIM on luma (0.2126, 0.7152, 0.0722) with an 11x11
/// Gaussian window (sigma 1.5), k1 = 0.01, k2 = 0.03, dynamic range 1,
/// averaged over the windows that fit entirely inside the image.
double ssim(const Image &a, const Image &b);

struct DepthMetrics {
    double abs_err = 0.0;
    double accuracy = 0.0;
    int valid = 0;
};

/// Over pixels where both maps are valid: mean |pred - gt| and the fraction
/// with |pred - gt| < threshold. Throws std::invalid_argument when no pixel
/// is valid in both.
DepthMetrics depth_metrics(const DepthMap &pred, const DepthMap &gt, double threshold);

} // namespace voxfuse
