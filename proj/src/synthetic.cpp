// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/synthetic.hpp"

#include "voxfuse/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace voxfuse {

using nlohmann::json;

namespace {

constexpr double kHitEpsilon = 1e-9;

json vec_json(const Vec3 &v) { return json::array({v.x(), v.y(), v.z()}); }
Vec3 vec_from(const json &j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }
json aabb_json(const Aabb &b) { return {{"min", vec_json(b.min)}, {"max", vec_json(b.max)}}; }
Aabb aabb_from(const json &j) { return {vec_from(j.at("min")), vec_from(j.at("max"))}; }

Rgb lambert(const Rgb &albedo, const Vec3 &normal, const SyntheticSpec &spec) {
    const double ndotl = std::max(0.0, normal.dot(spec.light_direction.normalized()));
    const double shade = spec.ambient + (1.0 - spec.ambient) * ndotl;
    return {albedo[0] * shade, albedo[1] * shade, albedo[2] * shade};
}

/// Slab test; returns entry distance and entry axis for a ray outside the box.
std::optional<std::pair<double, int>> box_entry(const Vec3 &lo, const Vec3 &hi, const Ray &ray) {
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    int axis = -1;
    for (int a = 0; a < 3; ++a) {
        const double d = ray.direction(a);
        if (d == 0.0) {
            if (ray.origin(a) < lo(a) || ray.origin(a) > hi(a)) {
                return std::nullopt;
            }
            continue;
        }
        double ta = (lo(a) - ray.origin(a)) / d;
        double tb = (hi(a) - ray.origin(a)) / d;
        if (ta > tb) {
            std::swap(ta, tb);
        }
        if (ta > t0) {
            t0 = ta;
            axis = a;
        }
        t1 = std::min(t1, tb);
    }
    if (axis < 0 || !(t1 >= t0) || !(t0 > kHitEpsilon)) {
        return std::nullopt;
    }
    return std::make_pair(t0, axis);
}

} // namespace

void to_json(json &j, const SyntheticSpec &s) {
    j = json{{"name", s.name},
             {"light_direction", vec_json(s.light_direction)},
             {"ambient", s.ambient},
             {"width", s.width},
             {"height", s.height},
             {"focal", s.focal},
             {"frames", s.frames},
             {"seed", s.seed},
             {"background", s.background},
             {"near", s.near},
             {"far", s.far},
             {"bounds", aabb_json(s.bounds)},
             {"voxel_size", s.voxel_size},
             {"key_frame_stride", s.key_frame_stride},
             {"held_out", s.held_out}};
    if (s.room) {
        j["room"] = {{"extent", aabb_json(s.room->extent)}, {"wall_colors", s.room->wall_colors}};
    }
    j["boxes"] = json::array();
    for (const BoxPrimitive &b : s.boxes) {
        j["boxes"].push_back({{"min", vec_json(b.min)}, {"max", vec_json(b.max)}, {"color", b.color}});
    }
    j["spheres"] = json::array();
    for (const SpherePrimitive &sp : s.spheres) {
        j["spheres"].push_back({{"center", vec_json(sp.center)}, {"radius", sp.radius}, {"color", sp.color}});
    }
    j["patches"] = json::array();
    for (const GlossyPatch &p : s.patches) {
        j["patches"].push_back({{"center", vec_json(p.center)},
                                {"normal_axis", p.normal_axis},
                                {"normal_sign", p.normal_sign},
                                {"half_extent", p.half_extent},
                                {"tangent_axis", p.tangent_axis},
                                {"base", p.base},
                                {"highlight", p.highlight}});
    }
    const TrajectorySpec &t = s.trajectory;
    j["trajectory"] = {{"center", vec_json(t.center)},     {"radius", t.radius},
                       {"yaw_start", t.yaw_start},         {"yaw_end", t.yaw_end},
                       {"look_outward", t.look_outward},   {"target", vec_json(t.target)},
                       {"pitch_drop", t.pitch_drop},       {"jitter", t.jitter}};
}

void from_json(const json &j, SyntheticSpec &s) {
    s = SyntheticSpec{};
    s.name = j.value("name", s.name);
    if (j.contains("light_direction")) {
        s.light_direction = vec_from(j["light_direction"]);
    }
    s.ambient = j.value("ambient", s.ambient);
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.focal = j.value("focal", s.focal);
    s.frames = j.value("frames", s.frames);
    s.seed = j.value("seed", s.seed);
    s.background = j.value("background", s.background);
    s.near = j.value("near", s.near);
    s.far = j.value("far", s.far);
    s.bounds = aabb_from(j.at("bounds"));
    s.voxel_size = j.value("voxel_size", s.voxel_size);
    s.key_frame_stride = j.value("key_frame_stride", s.key_frame_stride);
    s.held_out = j.value("held_out", s.held_out);
    if (j.contains("room")) {
        s.room = RoomSpec{aabb_from(j["room"].at("extent")), j["room"].at("wall_colors").get<std::array<Rgb, 6>>()};
    }
    for (const json &b : j.value("boxes", json::array())) {
        s.boxes.push_back({vec_from(b.at("min")), vec_from(b.at("max")), b.at("color").get<Rgb>()});
    }
    for (const json &sp : j.value("spheres", json::array())) {
        s.spheres.push_back({vec_from(sp.at("center")), sp.at("radius").get<double>(), sp.at("color").get<Rgb>()});
    }
    for (const json &p : j.value("patches", json::array())) {
        GlossyPatch g;
        g.center = vec_from(p.at("center"));
        g.normal_axis = p.value("normal_axis", g.normal_axis);
        g.normal_sign = p.value("normal_sign", g.normal_sign);
        g.half_extent = p.value("half_extent", g.half_extent);
        g.tangent_axis = p.value("tangent_axis", g.tangent_axis);
        g.base = p.at("base").get<Rgb>();
        g.highlight = p.at("highlight").get<Rgb>();
        s.patches.push_back(g);
    }
    if (j.contains("trajectory")) {
        const json &t = j["trajectory"];
        TrajectorySpec &o = s.trajectory;
        o.center = vec_from(t.at("center"));
        o.radius = t.value("radius", o.radius);
        o.yaw_start = t.value("yaw_start", o.yaw_start);
        o.yaw_end = t.value("yaw_end", o.yaw_end);
        o.look_outward = t.value("look_outward", o.look_outward);
        if (t.contains("target")) {
            o.target = vec_from(t["target"]);
        }
        o.pitch_drop = t.value("pitch_drop", o.pitch_drop);
        o.jitter = t.value("jitter", o.jitter);
    }
}

std::optional<TraceHit> trace(const SyntheticSpec &spec, const Ray &ray) {
    std::optional<TraceHit> best;
    auto offer = [&](double t, const Rgb &c) {
        if (t > kHitEpsilon && (!best || t < best->t)) {
            best = TraceHit{t, c};
        }
    };
    for (const BoxPrimitive &b : spec.boxes) {
        if (auto e = box_entry(b.min, b.max, ray)) {
            if (!best || e->first < best->t) {
                Vec3 n = Vec3::Zero();
                n(e->second) = ray.direction(e->second) > 0.0 ? -1.0 : 1.0;
                offer(e->first, lambert(b.color, n, spec));
            }
        }
    }
    for (const SpherePrimitive &s : spec.spheres) {
        const Vec3 oc = ray.origin - s.center;
        const double b = oc.dot(ray.direction);
        const double c = oc.squaredNorm() - s.radius * s.radius;
        const double disc = b * b - c;
        if (disc < 0.0) {
            continue;
        }
        const double sq = std::sqrt(disc);
        double t = -b - sq;
        if (t <= kHitEpsilon) {
            t = -b + sq;
        }
        if (t > kHitEpsilon && (!best || t < best->t)) {
            const Vec3 n = (ray.origin + t * ray.direction - s.center).normalized();
            offer(t, lambert(s.color, n, spec));
        }
    }
    for (const GlossyPatch &p : spec.patches) {
        const int a = p.normal_axis;
        const double dn = ray.direction(a) * p.normal_sign;
        if (!(dn < 0.0)) {
            continue;
        }
        const double t = (p.center(a) - ray.origin(a)) / ray.direction(a);
        const Vec3 x = ray.origin + t * ray.direction;
        bool inside = true;
        for (int k = 0; k < 3; ++k) {
            if (k != a && std::abs(x(k) - p.center(k)) > p.half_extent) {
                inside = false;
            }
        }
        if (inside) {
            const double s = 0.5 * (1.0 + ray.direction(p.tangent_axis));
            Rgb c;
            for (std::size_t k = 0; k < 3; ++k) {
                c[k] = std::clamp(p.base[k] + p.highlight[k] * s, 0.0, 1.0);
            }
            offer(t, c);
        }
    }
    if (spec.room && spec.room->extent.contains(ray.origin)) {
        const Aabb &r = spec.room->extent;
        double t_exit = std::numeric_limits<double>::infinity();
        int wall = -1;
        for (int a = 0; a < 3; ++a) {
            const double d = ray.direction(a);
            if (d == 0.0) {
                continue;
            }
            const double t = ((d > 0.0 ? r.max(a) : r.min(a)) - ray.origin(a)) / d;
            if (t < t_exit) {
                t_exit = t;
                wall = 2 * a + (d > 0.0 ? 1 : 0);
            }
        }
        if (wall >= 0 && (!best || t_exit < best->t)) {
            Vec3 n = Vec3::Zero();
            n(wall / 2) = wall % 2 == 1 ? -1.0 : 1.0;
            offer(t_exit, lambert(spec.room->wall_colors[static_cast<std::size_t>(wall)], n, spec));
        }
    }
    return best;
}

SceneDataset generate_synthetic(const SyntheticSpec &spec) {
    if (spec.frames < 1 || spec.width < 1 || spec.height < 1 || !(spec.focal > 0.0)) {
        throw std::invalid_argument("generate_synthetic: frames, image size and focal length must be positive");
    }
    SceneDataset scene;
    scene.name = spec.name;
    scene.near = spec.near;
    scene.far = spec.far;
    scene.bounds = spec.bounds;
    scene.voxel_size = spec.voxel_size;
    scene.key_frame_stride = spec.key_frame_stride;
    scene.background = spec.background;
    scene.held_out = spec.held_out;
    for (int i = 0; i < spec.frames; ++i) {
        if (std::find(spec.held_out.begin(), spec.held_out.end(), i) == spec.held_out.end()) {
            scene.train.push_back(i);
        }
    }

    Rng rng(spec.seed);
    std::uniform_real_distribution<double> jitter(-spec.trajectory.jitter, spec.trajectory.jitter);
    const CameraIntrinsics k{spec.focal, spec.focal, spec.width / 2.0, spec.height / 2.0, spec.width, spec.height};
    const TrajectorySpec &tr = spec.trajectory;
    for (int i = 0; i < spec.frames; ++i) {
        const double a = spec.frames == 1 ? 0.0 : static_cast<double>(i) / (spec.frames - 1);
        const double yaw = tr.yaw_start + a * (tr.yaw_end - tr.yaw_start);
        const Vec3 radial(std::cos(yaw), 0.0, std::sin(yaw));
        Vec3 eye = tr.center + tr.radius * radial;
        if (tr.jitter > 0.0) {
            const double jx = jitter(rng);
            const double jy = jitter(rng);
            const double jz = jitter(rng);
            eye += Vec3(jx, jy, jz);
        }
        const Vec3 target = tr.look_outward ? eye + radial + Vec3(0.0, tr.pitch_drop, 0.0) : tr.target;
        CameraView v;
        v.frame_index = i;
        v.intrinsics = k;
        v.pose = CameraPose::look_at(eye, target, Vec3::UnitY());
        v.image = Image(spec.width, spec.height);
        DepthMap depth(spec.width, spec.height);
        for (int y = 0; y < spec.height; ++y) {
            for (int x = 0; x < spec.width; ++x) {
                const Ray ray = ray_for_pixel(k, v.pose, Vec2(x + 0.5, y + 0.5));
                const std::optional<TraceHit> hit = trace(spec, ray);
                const Rgb c = hit ? hit->color : spec.background;
                for (int ch = 0; ch < 3; ++ch) {
                    v.image.at(x, y, ch) = c[static_cast<std::size_t>(ch)];
                }
                if (hit) {
                    depth.at(x, y) = hit->t;
                }
            }
        }
        v.image = quantize_8bit(v.image);
        scene.views.push_back(std::move(v));
        scene.depth.push_back(std::move(depth));
    }
    scene.validate();
    return scene;
}

SyntheticSpec cube_room_spec() {
    SyntheticSpec s;
    s.name = "cube-room";
    s.room = RoomSpec{Aabb{Vec3::Constant(-0.8), Vec3::Constant(0.8)},
                      {Rgb{0.85, 0.55, 0.45}, Rgb{0.45, 0.65, 0.85}, Rgb{0.55, 0.5, 0.45}, Rgb{0.9, 0.9, 0.85},
                       Rgb{0.6, 0.8, 0.55}, Rgb{0.85, 0.8, 0.5}}};
    s.boxes.push_back({Vec3(0.3, -0.8, 0.35), Vec3(0.65, -0.45, 0.7), Rgb{0.8, 0.25, 0.2}});
    s.boxes.push_back({Vec3(-0.45, -0.8, 0.45), Vec3(-0.15, -0.3, 0.75), Rgb{0.25, 0.4, 0.8}});
    s.spheres.push_back({Vec3(0.05, -0.6, 0.55), 0.18, Rgb{0.9, 0.8, 0.2}});
    s.trajectory.center = Vec3(0.0, -0.1, 0.0);
    s.trajectory.radius = 0.25;
    s.trajectory.yaw_start = 0.0;
    s.trajectory.yaw_end = 2.1;
    s.trajectory.look_outward = true;
    s.trajectory.pitch_drop = -0.25;
    s.trajectory.jitter = 0.005;
    s.frames = 12;
    s.seed = 1;
    s.background = {0.0, 0.0, 0.0};
    s.bounds = Aabb{Vec3::Constant(-0.9), Vec3::Constant(0.9)};
    s.voxel_size = 0.1;
    s.held_out = {2, 6, 9};
    return s;
}

SyntheticSpec sphere_spec() {
    SyntheticSpec s;
    s.name = "sphere";
    s.spheres.push_back({Vec3::Zero(), 0.3, Rgb{0.85, 0.45, 0.2}});
    s.trajectory.center = Vec3(0.0, 0.25, 0.0);
    s.trajectory.radius = 1.1;
    s.trajectory.yaw_start = 0.0;
    s.trajectory.yaw_end = 2.0 * std::numbers::pi * 11.0 / 12.0;
    s.trajectory.look_outward = false;
    s.trajectory.target = Vec3::Zero();
    s.frames = 12;
    s.seed = 2;
    s.background = {1.0, 1.0, 1.0};
    s.bounds = Aabb{Vec3::Constant(-0.5), Vec3::Constant(0.5)};
    s.voxel_size = 0.1;
    s.held_out = {2, 6, 9};
    return s;
}

SyntheticSpec glossy_spec() {
    SyntheticSpec s;
    s.name = "glossy";
    GlossyPatch p;
    p.center = Vec3::Zero();
    p.normal_axis = 2;
    p.normal_sign = 1.0;
    p.half_extent = 0.3;
    p.tangent_axis = 0;
    p.base = {0.2, 0.3, 0.5};
    p.highlight = {0.7, 0.6, 0.3};
    s.patches.push_back(p);
    s.trajectory.center = Vec3(0.0, 0.2, 0.0);
    s.trajectory.radius = 1.0;
    s.trajectory.yaw_start = 0.7;
    s.trajectory.yaw_end = 2.44;
    s.trajectory.look_outward = false;
    s.trajectory.target = Vec3::Zero();
    s.frames = 12;
    s.seed = 3;
    s.background = {1.0, 1.0, 1.0};
    s.bounds = Aabb{Vec3(-0.5, -0.5, -0.3), Vec3(0.5, 0.5, 0.3)};
    s.voxel_size = 0.1;
    s.held_out = {2, 6, 9};
    return s;
}

SyntheticSpec preset_spec(const std::string &name) {
    if (name == "cube-room") {
        return cube_room_spec();
    }
    if (name == "sphere") {
        return sphere_spec();
    }
    if (name == "glossy") {
        return glossy_spec();
    }
    throw std::invalid_argument("unknown scene preset '" + name + "' (expected cube-room, sphere or glossy)");
}

} // namespace voxfuse
