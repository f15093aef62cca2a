// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/scene.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace voxfuse {

struct BoxPrimitive {
    Vec3 min = Vec3::Zero();
    Vec3 max = Vec3::Zero();
    Rgb color{};
};

struct SpherePrimitive {
    Vec3 center = Vec3::Zero();
    double radius = 0.0;
    Rgb color{};
};

/// Axis-aligned square whose color depends on the viewing direction d:
/// base + highlight * (1 + d . tangent) / 2, clamped to [0,1].
struct GlossyPatch {
    Vec3 center = Vec3::Zero();
    int normal_axis = 2;
    double normal_sign = 1.0;
    double half_extent = 0.25;
    int tangent_axis = 0;
    Rgb base{};
    Rgb highlight{};
};

/// Closed room seen from inside; walls ordered -x, +x, -y, +y, -z, +z.
struct RoomSpec {
    Aabb extent;
    std::array<Rgb, 6> wall_colors{};
};

/// Cameras on a horizontal arc around `center`. Looking outward each
/// camera faces away from the center (room capture); otherwise it faces
/// `target`.
struct TrajectorySpec {
    Vec3 center = Vec3::Zero();
    double radius = 0.25;
    double yaw_start = 0.0;
    double yaw_end = 2.0;
    bool look_outward = true;
    Vec3 target = Vec3::Zero();
    /// Vertical offset of the look-at point relative to the eye (outward mode).
    double pitch_drop = 0.0;
    /// Uniform position jitter, meters.
    double jitter = 0.0;
};

struct SyntheticSpec {
    std::string name = "synthetic";
    std::optional<RoomSpec> room;
    std::vector<BoxPrimitive> boxes;
    std::vector<SpherePrimitive> spheres;
    std::vector<GlossyPatch> patches;
    Vec3 light_direction{0.3, 1.0, 0.5};
    double ambient = 0.4;
    int width = 64;
    int height = 64;
    double focal = 56.0;
    int frames = 12;
    TrajectorySpec trajectory;
    std::uint64_t seed = 0;
    Rgb background{0.0, 0.0, 0.0};
    double near = 0.05;
    double far = 3.0;
    Aabb bounds;
    double voxel_size = 0.1;
    int key_frame_stride = 1;
    std::vector<int> held_out;
};

void to_json(nlohmann::json &j, const SyntheticSpec &s);
void from_json(const nlohmann::json &j, SyntheticSpec &s);

struct TraceHit {
    double t = 0.0;
    Rgb color{};
};

/// Nearest primitive hit with its shaded color.
std::optional<TraceHit> trace(const SyntheticSpec &spec, const Ray &ray);

/// Analytic renders (8-bit quantized colors) and exact ray-distance depth.
SceneDataset generate_synthetic(const SyntheticSpec &spec);

/// Room of 1.6 m with boxes and a sphere, cameras turning in place.
SyntheticSpec cube_room_spec();
/// One opaque sphere seen from a ring of cameras.
SyntheticSpec sphere_spec();
/// A glossy patch seen from a sweep of directions.
SyntheticSpec glossy_spec();
SyntheticSpec preset_spec(const std::string &name);

} // namespace voxfuse
