// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/fusion.hpp"
#include "voxfuse/model.hpp"
#include "voxfuse/parameters.hpp"
#include "voxfuse/renderer.hpp"
#include "voxfuse/scene.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxfuse {

enum class Stage { local, end2end, finetune };

Stage parse_stage(const std::string &name);
std::string to_string(Stage s);

struct TrainConfig {
    Stage stage = Stage::local;
    double lr = 0.003;
    /// lr * lr_decay^(step / lr_decay_steps)
    double lr_decay = 1.0;
    int lr_decay_steps = 1000;
    int rays_per_batch = 1024;
    int iterations = 1000;
    double prune_gamma = 0.6;
    int prune_samples_per_axis = 2;
    /// Fine-tuning prunes and subdivides every this many iterations.
    int subdivide_stride = 10000;
    /// Fusion pruning starts once the end-to-end stage has run this many steps.
    int prune_warmup = 500;
    std::uint64_t seed = 0;
    int neighbors = 3;
    NeighborMode neighbor_mode = NeighborMode::temporal;
    double spatial_lambda = 0.5;
    /// Frames per truncated backpropagation window.
    int window = 4;
    /// Fuse the key frames before a window (without gradients) to seed its state.
    bool warm_start = true;
    int samples_per_voxel = 4;
    double max_depth = 3.0;
    Precision precision = Precision::f64;

    void validate() const;
    bool operator==(const TrainConfig &) const = default;
};

void to_json(nlohmann::json &j, const TrainConfig &c);
void from_json(const nlohmann::json &j, TrainConfig &c);

/// Everything needed to resume training bit-exactly.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    ModelConfig model;
    TrainConfig config;
    ParameterStore params;
    AdamState adam;
    std::optional<SparseVoxelGrid> grid;
    Rng rng;

    bool operator==(const Checkpoint &o) const;
};

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class TrainingDiverged : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

Checkpoint init_checkpoint(const ModelConfig &model, const TrainConfig &config);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint &c);
/// Throws CheckpointError on bad magic, unknown version, truncation or a
/// checksum mismatch.
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t> &bytes);
void save_checkpoint(const Checkpoint &c, const std::filesystem::path &path);
Checkpoint load_checkpoint(const std::filesystem::path &path);

/// Standalone grid files share the checkpoint's grid encoding and checksum.
void save_grid(const SparseVoxelGrid &grid, const std::filesystem::path &path);
SparseVoxelGrid load_grid(const std::filesystem::path &path);

/// Mean squared error over rays and channels; rendered is rays x 3.
Var loss_local(Var rendered, const Tensor &target);

/// Per-frame renders of the local and the global volume against one target.
struct FrameRenders {
    Var local;
    Var global;
    Tensor target;
};

/// Sum over frames of local MSE + global MSE.
Var loss_fuse(std::span<const FrameRenders> frames);

struct IterationLog {
    Stage stage = Stage::local;
    std::int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::size_t voxels = 0;
};

using TrainObserver = std::function<void(const IterationLog &)>;

/// Each stage runs `iterations` further steps on the checkpoint in place.
/// Switching stage resets the optimizer state.
void train_stage_local(const SceneDataset &scene, Checkpoint &ckpt, int iterations, const TrainObserver &observer = {});
void train_stage_end2end(const SceneDataset &scene, Checkpoint &ckpt, int iterations,
                         const TrainObserver &observer = {});
/// Optimizes ckpt.grid features and the decoder; everything else stays frozen.
void finetune(const SceneDataset &scene, Checkpoint &ckpt, int iterations, const TrainObserver &observer = {});

RenderConfig render_config(const SceneDataset &scene, const TrainConfig &config);
SequenceConfig sequence_config(const TrainConfig &config, bool prune);

/// Global volume fused over the training key frames.
FusionState reconstruct_scene(const SceneDataset &scene, const Checkpoint &ckpt, bool prune = true,
                              const FusionObserver &observer = {});

/// Local volume of one key frame (position into scene.key_frames()).
SparseVoxelGrid reconstruct_local(const SceneDataset &scene, const Checkpoint &ckpt, int key_position);

struct ViewScore {
    int frame = 0;
    double psnr = 0.0;
    double ssim = 0.0;
};

std::vector<ViewScore> evaluate_views(const SceneDataset &scene, const std::vector<int> &positions,
                                      const SparseVoxelGrid &grid, const Checkpoint &ckpt);
double mean_psnr(const std::vector<ViewScore> &scores);

} // namespace voxfuse
