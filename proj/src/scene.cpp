// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/scene.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

namespace voxfuse {

using nlohmann::json;
using Kind = ManifestError::Kind;

std::vector<int> SceneDataset::key_frames() const {
    std::vector<int> keys;
    for (std::size_t i = 0; i < train.size(); i += static_cast<std::size_t>(std::max(1, key_frame_stride))) {
        keys.push_back(train[i]);
    }
    return keys;
}

std::vector<CameraView> SceneDataset::select(const std::vector<int> &positions) const {
    std::vector<CameraView> out;
    for (int p : positions) {
        out.push_back(views.at(static_cast<std::size_t>(p)));
    }
    return out;
}

void SceneDataset::validate() const {
    if (!(near >= 0.0) || !(far > near)) {
        throw ManifestError(Kind::malformed, "scene '" + name + "': need 0 <= near < far");
    }
    if (!(voxel_size > 0.0) || !(bounds.max.array() > bounds.min.array()).all()) {
        throw ManifestError(Kind::malformed, "scene '" + name + "': bounds must be non-empty and voxel_size positive");
    }
    for (std::size_t i = 0; i < views.size(); ++i) {
        try {
            views[i].pose.validate();
        } catch (const std::invalid_argument &e) {
            throw ManifestError(Kind::invalid_pose, "frame " + std::to_string(i) + ": " + e.what());
        }
        try {
            views[i].validate();
        } catch (const std::invalid_argument &e) {
            throw ManifestError(Kind::dimension_mismatch, "frame " + std::to_string(i) + ": " + e.what());
        }
    }
    if (!depth.empty() && depth.size() != views.size()) {
        throw ManifestError(Kind::malformed, "scene '" + name + "': depth maps do not match the frame count");
    }
    std::set<int> seen;
    for (const auto *list : {&train, &held_out}) {
        for (int p : *list) {
            if (p < 0 || p >= static_cast<int>(views.size())) {
                throw ManifestError(Kind::malformed, "split refers to missing frame " + std::to_string(p));
            }
            if (!seen.insert(p).second) {
                throw ManifestError(Kind::malformed, "frame " + std::to_string(p) + " appears in the split twice");
            }
        }
    }
}

namespace {

Vec3 vec3_from(const json &j, const std::string &what) {
    if (!j.is_array() || j.size() != 3) {
        throw ManifestError(Kind::malformed, what + ": expected 3 numbers");
    }
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

std::string frame_name(std::size_t i, const char *ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%03zu.%s", i, ext);
    return buf;
}

} // namespace

SceneDataset load_scene(const std::filesystem::path &manifest) {
    std::ifstream in(manifest);
    if (!in) {
        throw ManifestError(Kind::missing_file, "cannot open manifest " + manifest.string());
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception &e) {
        throw ManifestError(Kind::malformed, manifest.string() + ": " + e.what());
    }
    const std::filesystem::path dir = manifest.parent_path();
    SceneDataset s;
    try {
        if (j.value("schema", std::string()) != kSceneSchema) {
            throw ManifestError(Kind::malformed, manifest.string() + ": unsupported schema, expected " + kSceneSchema);
        }
        s.name = j.value("name", s.name);
        s.near = j.at("near").get<double>();
        s.far = j.at("far").get<double>();
        s.bounds.min = vec3_from(j.at("bounds").at("min"), "bounds.min");
        s.bounds.max = vec3_from(j.at("bounds").at("max"), "bounds.max");
        s.voxel_size = j.at("voxel_size").get<double>();
        s.key_frame_stride = j.value("key_frame_stride", 1);
        if (j.contains("background")) {
            const Vec3 bg = vec3_from(j["background"], "background");
            s.background = {bg.x(), bg.y(), bg.z()};
        }
        bool any_depth = false;
        std::vector<DepthMap> depth;
        const json &frames = j.at("frames");
        for (std::size_t i = 0; i < frames.size(); ++i) {
            const json &f = frames[i];
            CameraView v;
            v.frame_index = static_cast<int>(i);
            const json &k = f.at("intrinsics");
            v.intrinsics = {k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(),
                            k.at("cy").get<double>(), k.at("width").get<int>(),  k.at("height").get<int>()};
            const std::vector<double> m = f.at("pose").get<std::vector<double>>();
            try {
                v.pose = CameraPose::from_row_major(m);
            } catch (const std::invalid_argument &e) {
                throw ManifestError(Kind::invalid_pose, "frame " + std::to_string(i) + ": " + e.what());
            }
            const std::filesystem::path img = dir / f.at("image").get<std::string>();
            if (!std::filesystem::exists(img)) {
                throw ManifestError(Kind::missing_file, "frame " + std::to_string(i) + ": missing image " + img.string());
            }
            v.image = read_png(img);
            if (f.contains("depth")) {
                const std::filesystem::path dp = dir / f["depth"].get<std::string>();
                if (!std::filesystem::exists(dp)) {
                    throw ManifestError(Kind::missing_file,
                                        "frame " + std::to_string(i) + ": missing depth " + dp.string());
                }
                depth.push_back(read_pfm(dp));
                any_depth = true;
            } else {
                depth.emplace_back();
            }
            s.views.push_back(std::move(v));
        }
        if (any_depth) {
            s.depth = std::move(depth);
        }
        if (j.contains("split")) {
            s.train = j["split"].value("train", std::vector<int>{});
            s.held_out = j["split"].value("held_out", std::vector<int>{});
        } else {
            for (std::size_t i = 0; i < s.views.size(); ++i) {
                s.train.push_back(static_cast<int>(i));
            }
        }
    } catch (const json::exception &e) {
        throw ManifestError(Kind::malformed, manifest.string() + ": " + e.what());
    } catch (const IoError &e) {
        throw ManifestError(Kind::malformed, e.what());
    }
    s.validate();
    return s;
}

std::filesystem::path save_scene(const SceneDataset &scene, const std::filesystem::path &dir,
                                 const std::string &manifest_name) {
    scene.validate();
    std::filesystem::create_directories(dir);
    json frames = json::array();
    for (std::size_t i = 0; i < scene.views.size(); ++i) {
        const CameraView &v = scene.views[i];
        const std::string img = frame_name(i, "png");
        write_png(dir / img, v.image);
        const auto m = v.pose.to_row_major();
        json f{{"image", img},
               {"intrinsics",
                {{"fx", v.intrinsics.fx},
                 {"fy", v.intrinsics.fy},
                 {"cx", v.intrinsics.cx},
                 {"cy", v.intrinsics.cy},
                 {"width", v.intrinsics.width},
                 {"height", v.intrinsics.height}}},
               {"pose", std::vector<double>(m.begin(), m.end())}};
        if (!scene.depth.empty()) {
            const std::string d = frame_name(i, "pfm");
            write_pfm(dir / d, scene.depth[i]);
            f["depth"] = d;
        }
        frames.push_back(std::move(f));
    }
    json j{{"schema", kSceneSchema},
           {"convention", "pose is the camera-to-world 4x4 matrix, row-major; camera axes x right, y down, z forward; "
                          "pixel (0,0) is the top-left image corner; lengths in meters; depth maps hold ray distance"},
           {"name", scene.name},
           {"near", scene.near},
           {"far", scene.far},
           {"bounds",
            {{"min", {scene.bounds.min.x(), scene.bounds.min.y(), scene.bounds.min.z()}},
             {"max", {scene.bounds.max.x(), scene.bounds.max.y(), scene.bounds.max.z()}}}},
           {"voxel_size", scene.voxel_size},
           {"key_frame_stride", scene.key_frame_stride},
           {"background", {scene.background[0], scene.background[1], scene.background[2]}},
           {"frames", std::move(frames)},
           {"split", {{"train", scene.train}, {"held_out", scene.held_out}}}};
    const std::filesystem::path out = dir / manifest_name;
    std::ofstream os(out);
    if (!os) {
        throw IoError("cannot write " + out.string());
    }
    os << j.dump(2) << '\n';
    return out;
}

} // namespace voxfuse
