// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/camera.hpp"
#include "voxfuse/image.hpp"
#include "voxfuse/renderer.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxfuse {

constexpr const char *kSceneSchema = "voxfuse.scene/1";

/// Ordered frames with a train / held-out split. Split lists and key frames
/// are positions into `views`.
struct SceneDataset {
    std::string name = "scene";
    std::vector<CameraView> views;
    /// Reference depth per view (ray distance), empty when unknown.
    std::vector<DepthMap> depth;
    double near = 0.05;
    double far = 3.0;
    Aabb bounds;
    double voxel_size = 0.1;
    int key_frame_stride = 1;
    std::vector<int> train;
    std::vector<int> held_out;
    Rgb background{0.0, 0.0, 0.0};

    Lattice lattice() const { return {bounds.min, voxel_size}; }
    /// Every key_frame_stride-th training frame.
    std::vector<int> key_frames() const;
    std::vector<CameraView> select(const std::vector<int> &positions) const;
    /// Throws ManifestError on inconsistencies.
    void validate() const;
};

class ManifestError : public std::runtime_error {
  public:
    enum class Kind { missing_file, invalid_pose, dimension_mismatch, malformed };

    ManifestError(Kind kind, const std::string &what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

  private:
    Kind kind_;
};

SceneDataset load_scene(const std::filesystem::path &manifest);

/// Writes frame_<i>.png (and frame_<i>.pfm when depth is present) next to
/// the manifest; returns the manifest path.
std::filesystem::path save_scene(const SceneDataset &scene, const std::filesystem::path &dir,
                                 const std::string &manifest_name = "scene.json");

} // namespace voxfuse
