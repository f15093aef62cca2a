// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/camera.hpp"
#include "voxfuse/model.hpp"
#include "voxfuse/sparse_grid.hpp"
#include "voxfuse/tape.hpp"

#include <functional>
#include <span>
#include <vector>

namespace voxfuse {

/// One gated update of the global volume over the local volume's active
/// set. Voxels only in `global` are copied through untouched; voxels only in
/// `local` start from a zero hidden state. The result lives on the union of
/// both active sets.
GridVar fuse_step(Tape &tape, const ModelConfig &cfg, const GridVar &global, const GridVar &local);

struct PruneConfig {
    bool enabled = true;
    double gamma = 0.6;
    int samples_per_axis = 2;
    /// Prune after every stride-th fused frame.
    int stride = 1;
};

/// Taped pruning: surviving rows are gathered so gradients still reach them.
GridVar prune_grid(const GridVar &grid, const DensityProbe &probe, double gamma, int samples_per_axis,
                   std::vector<VoxelCoord> *removed = nullptr);

struct SequenceConfig {
    FrustumConfig frustum;
    NeighborConfig neighbors;
    PruneConfig prune;
};

struct FusionState {
    SparseVoxelGrid global;
    int frames_fused = 0;
};

struct FusionStep {
    int position = 0;
    int frame_index = 0;
    SparseVoxelGrid local;
    SparseVoxelGrid fused;
    std::vector<VoxelCoord> removed;
    double seconds = 0.0;
};

using FusionObserver = std::function<void(const FusionStep &)>;

/// Inference over an ordered key-frame sequence: local reconstruction from
/// each frame's neighborhood, fuse_step, then pruning with the current
/// decoder as density probe. Only positions [first, last) are fused (last < 0
/// means the end); neighborhoods are still drawn from the whole sequence.
FusionState fuse_sequence(std::span<const CameraView> frames, const ParameterStore &params, const ModelConfig &cfg,
                          const Lattice &lattice, const SequenceConfig &seq, FusionState state = {},
                          const FusionObserver &observer = {}, Precision precision = Precision::f64, int first = 0,
                          int last = -1);

/// The neighborhood of position t inside frames.
std::vector<CameraView> neighborhood(std::span<const CameraView> frames, int t, const NeighborConfig &cfg);

} // namespace voxfuse
