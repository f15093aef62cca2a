// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/camera.hpp"
#include "voxfuse/layers.hpp"
#include "voxfuse/model.hpp"
#include "voxfuse/sparse_grid.hpp"

#include <span>
#include <vector>

namespace voxfuse {

/// Encoder output; `factor` is the downsampling relative to the image.
struct FeatureMap {
    FeatureMap2D map;
    int factor = 1;
};

/// Image as an (H*W) x 3 tape constant.
FeatureMap2D image_input(Tape &tape, const Image &img);

FeatureMap extract_features(Tape &tape, const ModelConfig &cfg, const Image &img);

/// MLP G over unit directions (n x 3 -> n x direction_width). Throws
/// std::invalid_argument on a non-unit direction.
Var encode_direction(Tape &tape, const ModelConfig &cfg, std::span<const Vec3> directions);

/// Features of one view over the voxels of `active` it sees. rows[i] is the
/// row in `active` of feature row i.
struct PerViewFeatureVolume {
    IndexPtr active;
    std::vector<int> rows;
    Var features;
};

/// Bilinear lookup of the feature map at a continuous pixel location, with
/// the map sampled at its cell centers and clamped at the border.
Var bilinear_lookup(const FeatureMap &fm, std::span<const Vec2> pixels);

PerViewFeatureVolume build_per_view_volume(Tape &tape, const ModelConfig &cfg, const CameraView &view,
                                           const FeatureMap &fm, const IndexPtr &active, double max_depth);

/// [mean || population variance] over the views that see each voxel. Voxels
/// seen by no view are left out of the result.
GridVar aggregate_mean_var(const IndexPtr &active, std::span<const PerViewFeatureVolume> volumes);

/// Sparse network J.
GridVar reconstruct_local_volume(Tape &tape, const ModelConfig &cfg, const GridVar &aggregated);

/// Full local pipeline over a neighborhood of views; the active set is the
/// union of their visibility-masked frusta.
GridVar build_local_volume(Tape &tape, const ModelConfig &cfg, std::span<const CameraView> views,
                           const Lattice &lattice, const FrustumConfig &frustum);

} // namespace voxfuse
