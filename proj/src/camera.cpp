// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/camera.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace voxfuse {

void CameraIntrinsics::validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) {
        throw std::invalid_argument("intrinsics: focal lengths must be positive");
    }
    if (width <= 0 || height <= 0) {
        throw std::invalid_argument("intrinsics: image size must be positive");
    }
    if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height)) {
        throw std::invalid_argument("intrinsics: principal point outside the image");
    }
}

void CameraPose::validate() const {
    if (!rotation.allFinite() || !translation.allFinite()) {
        throw std::invalid_argument("pose: non-finite entries");
    }
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).norm();
    if (!(ortho < 1e-6)) {
        throw std::invalid_argument("pose: rotation is not orthonormal (||R^T R - I|| = " + std::to_string(ortho) + ")");
    }
    if (rotation.determinant() < 0.0) {
        throw std::invalid_argument("pose: rotation is a reflection (det < 0)");
    }
}

std::array<double, 16> CameraPose::to_row_major() const {
    std::array<double, 16> m{};
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) {
            m[static_cast<std::size_t>(r * 4 + c)] = rotation(r, c);
        }
        m[static_cast<std::size_t>(r * 4 + 3)] = translation(r);
    }
    m[15] = 1.0;
    return m;
}

CameraPose CameraPose::from_row_major(std::span<const double> m) {
    if (m.size() != 16) {
        throw std::invalid_argument("pose: expected 16 values");
    }
    CameraPose p;
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) {
            p.rotation(r, c) = m[static_cast<std::size_t>(r * 4 + c)];
        }
        p.translation(r) = m[static_cast<std::size_t>(r * 4 + 3)];
    }
    if (m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0) {
        throw std::invalid_argument("pose: last row must be [0 0 0 1]");
    }
    return p;
}

CameraPose CameraPose::look_at(const Vec3 &eye, const Vec3 &target, const Vec3 &up) {
    const Vec3 forward = (target - eye).normalized();
    // Image y points down, so camera y is the negated up direction.
    Vec3 right = forward.cross(-up);
    if (right.norm() < 1e-12) {
        throw std::invalid_argument("look_at: up is parallel to the viewing direction");
    }
    right.normalize();
    const Vec3 down = forward.cross(right);
    CameraPose p;
    p.rotation.col(0) = right;
    p.rotation.col(1) = down;
    p.rotation.col(2) = forward;
    p.translation = eye;
    return p;
}

void CameraView::validate() const {
    intrinsics.validate();
    pose.validate();
    if (image.width != intrinsics.width || image.height != intrinsics.height) {
        throw std::invalid_argument("view " + std::to_string(frame_index) + ": image is " + std::to_string(image.width) +
                                    "x" + std::to_string(image.height) + " but intrinsics say " +
                                    std::to_string(intrinsics.width) + "x" + std::to_string(intrinsics.height));
    }
}

Projection project(const Vec3 &world, const CameraIntrinsics &k, const CameraPose &pose) {
    const Vec3 cam = pose.to_camera(world);
    Projection p;
    p.depth = cam.z();
    if (!(cam.z() > 0.0)) {
        p.behind_camera = true;
        p.outside_image = true;
        return p;
    }
    p.pixel = Vec2(k.fx * cam.x() / cam.z() + k.cx, k.fy * cam.y() / cam.z() + k.cy);
    p.outside_image = !(p.pixel.x() >= 0.0 && p.pixel.x() < k.width && p.pixel.y() >= 0.0 && p.pixel.y() < k.height);
    return p;
}

Vec3 unproject(const Vec2 &pixel, double depth, const CameraIntrinsics &k, const CameraPose &pose) {
    const Vec3 cam((pixel.x() - k.cx) / k.fx * depth, (pixel.y() - k.cy) / k.fy * depth, depth);
    return pose.to_world(cam);
}

Ray ray_for_pixel(const CameraIntrinsics &k, const CameraPose &pose, const Vec2 &pixel) {
    if (!(pixel.x() >= 0.0 && pixel.x() <= k.width && pixel.y() >= 0.0 && pixel.y() <= k.height)) {
        throw std::out_of_range("ray_for_pixel: pixel outside the image");
    }
    const Vec3 dir_cam((pixel.x() - k.cx) / k.fx, (pixel.y() - k.cy) / k.fy, 1.0);
    return {pose.center(), (pose.rotation * dir_cam).normalized()};
}

namespace {

void add_frustum_voxels(const CameraIntrinsics &k, const CameraPose &pose, const Lattice &lattice,
                        const FrustumConfig &cfg, std::vector<VoxelCoord> &out) {
    Vec3 lo = pose.center();
    Vec3 hi = pose.center();
    for (const Vec2 &corner : {Vec2(0.0, 0.0), Vec2(k.width, 0.0), Vec2(0.0, k.height), Vec2(k.width, k.height)}) {
        const Vec3 p = unproject(corner, cfg.max_depth, k, pose);
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    if (cfg.bounds) {
        lo = lo.cwiseMax(cfg.bounds->min);
        hi = hi.cwiseMin(cfg.bounds->max);
        if ((lo.array() > hi.array()).any()) {
            return;
        }
    }
    const Vec3 glo = ((lo - lattice.origin) / lattice.voxel_size).array() - 0.5;
    const Vec3 ghi = ((hi - lattice.origin) / lattice.voxel_size).array() - 0.5;
    const Eigen::Vector3i a = glo.array().floor().cast<int>();
    const Eigen::Vector3i b = ghi.array().ceil().cast<int>();
    for (int x = a.x(); x <= b.x(); ++x) {
        for (int y = a.y(); y <= b.y(); ++y) {
            for (int z = a.z(); z <= b.z(); ++z) {
                const VoxelCoord c{x, y, z};
                const Vec3 center = lattice.voxel_center(c);
                if (cfg.bounds && !cfg.bounds->contains(center)) {
                    continue;
                }
                const Projection p = project(center, k, pose);
                if (p.visible() && p.depth <= cfg.max_depth) {
                    out.push_back(c);
                }
            }
        }
    }
}

} // namespace

std::vector<VoxelCoord> frustum_voxels(std::span<const CameraIntrinsics> intrinsics, std::span<const CameraPose> poses,
                                       const Lattice &lattice, const FrustumConfig &cfg) {
    if (intrinsics.size() != poses.size() || poses.empty()) {
        throw std::invalid_argument("frustum_voxels: need at least one view");
    }
    if (!(lattice.voxel_size > 0.0) || !(cfg.max_depth > 0.0)) {
        throw std::invalid_argument("frustum_voxels: voxel size and max depth must be positive");
    }
    std::vector<VoxelCoord> out;
    for (std::size_t i = 0; i < poses.size(); ++i) {
        add_frustum_voxels(intrinsics[i], poses[i], lattice, cfg, out);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::vector<VoxelCoord> frustum_voxels(std::span<const CameraView> views, const Lattice &lattice, const FrustumConfig &cfg) {
    std::vector<CameraIntrinsics> ks;
    std::vector<CameraPose> ps;
    for (const CameraView &v : views) {
        ks.push_back(v.intrinsics);
        ps.push_back(v.pose);
    }
    return frustum_voxels(ks, ps, lattice, cfg);
}

std::vector<int> select_neighbor_views(int t, std::span<const CameraPose> poses, const NeighborConfig &cfg) {
    const int n = static_cast<int>(poses.size());
    if (t < 0 || t >= n) {
        throw std::out_of_range("select_neighbor_views: frame index out of range");
    }
    const int needed = cfg.include_self ? cfg.count : cfg.count + 1;
    if (cfg.count < 1 || needed > n) {
        throw std::invalid_argument("select_neighbor_views: asked for " + std::to_string(cfg.count) +
                                    " views from a sequence of " + std::to_string(n));
    }
    std::vector<double> score(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        if (cfg.mode == NeighborMode::temporal) {
            score[static_cast<std::size_t>(i)] = std::abs(i - t);
        } else {
            const double dist = (poses[static_cast<std::size_t>(i)].center() - poses[static_cast<std::size_t>(t)].center()).norm();
            const double cosang = std::clamp(
                poses[static_cast<std::size_t>(i)].forward().dot(poses[static_cast<std::size_t>(t)].forward()), -1.0, 1.0);
            score[static_cast<std::size_t>(i)] = i == t ? 0.0 : dist + cfg.spatial_lambda * std::acos(cosang);
        }
    }
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    // t first, then ascending score, ties toward the smaller index.
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if ((a == t) != (b == t)) {
            return a == t;
        }
        return score[static_cast<std::size_t>(a)] < score[static_cast<std::size_t>(b)];
    });
    std::vector<int> out;
    for (int i : order) {
        if (!cfg.include_self && i == t) {
            continue;
        }
        out.push_back(i);
        if (static_cast<int>(out.size()) == cfg.count) {
            break;
        }
    }
    return out;
}

} // namespace voxfuse
