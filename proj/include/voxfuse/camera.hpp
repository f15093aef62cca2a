// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/image.hpp"
#include "voxfuse/sparse_grid.hpp"
#include "voxfuse/tensor.hpp"

#include <optional>
#include <span>
#include <vector>

namespace voxfuse {

struct CameraIntrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 1;
    int height = 1;

    /// Throws std::invalid_argument on fx/fy <= 0 or a principal point outside the image.
    void validate() const;
    bool operator==(const CameraIntrinsics &) const = default;
};

/// Camera-to-world rigid transform. Camera frame: x right, y down, z forward.
struct CameraPose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    /// Throws std::invalid_argument unless ||R^T R - I|| < 1e-6 and det(R) = +1.
    void validate() const;
    Vec3 center() const { return translation; }
    Vec3 forward() const { return rotation.col(2); }
    Vec3 to_camera(const Vec3 &world) const { return rotation.transpose() * (world - translation); }
    Vec3 to_world(const Vec3 &camera) const { return rotation * camera + translation; }

    /// Rows of the 4x4 homogeneous camera-to-world matrix, row-major.
    std::array<double, 16> to_row_major() const;
    static CameraPose from_row_major(std::span<const double> m);
    /// Camera at eye looking toward target; up is the world direction that
    /// should appear upward in the image.
    static CameraPose look_at(const Vec3 &eye, const Vec3 &target, const Vec3 &up);
    bool operator==(const CameraPose &) const = default;
};

struct CameraView {
    Image image;
    CameraIntrinsics intrinsics;
    CameraPose pose;
    int frame_index = 0;

    void validate() const;
};

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3::UnitZ();
};

struct Projection {
    Vec2 pixel = Vec2::Zero();
    double depth = 0.0;
    bool behind_camera = false;
    bool outside_image = false;

    bool visible() const { return !behind_camera && !outside_image; }
};

/// Pinhole projection. Pixel (0,0) is the top-left corner of the top-left
/// pixel, so pixel centers sit at half-integer coordinates.
Projection project(const Vec3 &world, const CameraIntrinsics &k, const CameraPose &pose);
inline Projection project(const Vec3 &world, const CameraView &view) { return project(world, view.intrinsics, view.pose); }

/// World point seen at a pixel at the given camera-frame depth.
Vec3 unproject(const Vec2 &pixel, double depth, const CameraIntrinsics &k, const CameraPose &pose);

/// Ray from the camera center through a continuous pixel location. Throws
/// std::out_of_range unless 0 <= u <= width and 0 <= v <= height.
Ray ray_for_pixel(const CameraIntrinsics &k, const CameraPose &pose, const Vec2 &pixel);
inline Ray ray_for_pixel(const CameraView &view, const Vec2 &pixel) {
    return ray_for_pixel(view.intrinsics, view.pose, pixel);
}

struct Aabb {
    Vec3 min = Vec3::Zero();
    Vec3 max = Vec3::Zero();

    bool contains(const Vec3 &p) const {
        return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
    }
    bool operator==(const Aabb &) const = default;
};

struct FrustumConfig {
    double max_depth = 3.0;
    /// Voxels whose centers fall outside these bounds are dropped.
    std::optional<Aabb> bounds;
};

/// Voxels whose centers project inside at least one view with camera-frame
/// depth in (0, max_depth], sorted in canonical coordinate order.
std::vector<VoxelCoord> frustum_voxels(std::span<const CameraIntrinsics> intrinsics, std::span<const CameraPose> poses,
                                       const Lattice &lattice, const FrustumConfig &cfg);
std::vector<VoxelCoord> frustum_voxels(std::span<const CameraView> views, const Lattice &lattice, const FrustumConfig &cfg);

enum class NeighborMode { temporal, spatial };

struct NeighborConfig {
    int count = 3;
    NeighborMode mode = NeighborMode::temporal;
    /// Meters per radian of forward-axis angle in the spatial score.
    double spatial_lambda = 0.5;
    bool include_self = true;
};

/// Positions into poses of the frames used to reconstruct frame t. With
/// include_self the first entry is t followed by count-1 neighbors; otherwise
/// count neighbors other than t. Ties resolve toward the smaller position.
std::vector<int> select_neighbor_views(int t, std::span<const CameraPose> poses, const NeighborConfig &cfg);

} // namespace voxfuse
