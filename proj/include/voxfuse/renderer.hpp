// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/camera.hpp"
#include "voxfuse/image.hpp"
#include "voxfuse/model.hpp"
#include "voxfuse/parameters.hpp"
#include "voxfuse/sparse_grid.hpp"
#include "voxfuse/tape.hpp"

#include <array>
#include <span>
#include <vector>

namespace voxfuse {

using Rgb = std::array<double, 3>;

struct RadianceOutput {
    double sigma = 0.0;
    Rgb rgb{};
};

/// Taped decoder outputs for a batch of points: sigma is n x 1, rgb n x 3.
struct DecodedBatch {
    Var sigma;
    Var rgb;
};

/// Decoder over [PE(V(x)) || d]. Directions must be unit length; the density
/// head never sees them. Parameters come from the tape's bound store.
DecodedBatch decode_radiance(Tape &tape, const ModelConfig &cfg, const GridVar &grid, std::span<const Vec3> points,
                             std::span<const Vec3> directions);

RadianceOutput decode_radiance(const SparseVoxelGrid &grid, const ParameterStore &params, const ModelConfig &cfg,
                               const Vec3 &x, const Vec3 &d);

/// Density of the decoder over a fixed grid, for pruning.
DensityProbe make_density_probe(const SparseVoxelGrid &grid, const ParameterStore &params, const ModelConfig &cfg,
                                Precision precision = Precision::f64);

struct VoxelHit {
    VoxelCoord coord;
    double t_enter = 0.0;
    double t_exit = 0.0;
};

/// Active voxels pierced by the ray inside [near, far], in order of entry.
/// Zero-length touches are skipped.
std::vector<VoxelHit> traverse_active(const Ray &ray, const VoxelIndex &index, double near, double far);

struct RaySample {
    Vec3 position = Vec3::Zero();
    double t = 0.0;
    double delta = 0.0;
};

struct SampleConfig {
    int per_voxel = 4;
    /// Uniform jitter inside each stratum; otherwise stratum midpoints.
    bool jitter = false;
};

/// per_voxel stratified samples in every active voxel along the ray. rng is
/// only read when jitter is on.
std::vector<RaySample> sample_ray(const Ray &ray, const VoxelIndex &index, double near, double far,
                                  const SampleConfig &cfg, Rng *rng = nullptr);

struct CompositeResult {
    Rgb rgb{};
    double depth = 0.0;
    double transmittance = 1.0;
    /// Sum of the sample weights, 1 - transmittance.
    double opacity = 0.0;
};

constexpr double kDepthEpsilon = 1e-6;

/// Alpha compositing of decoded samples. Throws std::invalid_argument when
/// the samples are not strictly increasing in t.
CompositeResult composite(std::span<const RaySample> samples, std::span<const double> sigma,
                          std::span<const Rgb> rgb, const Rgb &background);

/// Sample ranges of a ray batch: ray r owns samples [offsets[r], offsets[r+1]).
struct RayBatchLayout {
    std::vector<int> offsets{0};
    std::vector<double> t;
    std::vector<double> delta;

    int ray_count() const { return static_cast<int>(offsets.size()) - 1; }
};

/// Taped compositing; returns rays x 5 with columns r, g, b, depth,
/// transmittance.
Var composite(Var sigma, Var rgb, const RayBatchLayout &layout, const Rgb &background);

struct RenderConfig {
    double near = 0.0;
    double far = 10.0;
    SampleConfig sampling;
    Rgb background{0.0, 0.0, 0.0};
    int chunk_rays = 1024;
};

/// Rays x 5 as in composite(). Rays that meet no active voxel return the
/// background with transmittance 1.
Var render_rays(Tape &tape, const ModelConfig &cfg, const GridVar &grid, std::span<const Ray> rays,
                const RenderConfig &rc, Rng *rng = nullptr);

struct RenderedImage {
    Image image;
    /// Ray distance; NaN where nothing was hit.
    DepthMap depth;
};

RenderedImage render_image(const CameraIntrinsics &k, const CameraPose &pose, const SparseVoxelGrid &grid,
                           const ParameterStore &params, const ModelConfig &cfg, RenderConfig rc,
                           Precision precision = Precision::f64);

/// Pixel-center rays of a view.
std::vector<Ray> pixel_rays(const CameraIntrinsics &k, const CameraPose &pose, std::span<const int> pixels);

} // namespace voxfuse
