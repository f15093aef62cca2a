// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/fusion.hpp"

#include "voxfuse/layers.hpp"
#include "voxfuse/local_reconstruction.hpp"
#include "voxfuse/ops.hpp"
#include "voxfuse/renderer.hpp"

#include <algorithm>
#include <chrono>
#include <stdexcept>

namespace voxfuse {

GridVar fuse_step(Tape &tape, const ModelConfig &cfg, const GridVar &global, const GridVar &local) {
    if (!(global.index->lattice() == local.index->lattice())) {
        throw std::invalid_argument("fuse_step: global and local volumes use different lattices");
    }
    if (global.features.cols() != cfg.channels || local.features.cols() != cfg.channels) {
        throw std::invalid_argument("fuse_step: expected " + std::to_string(cfg.channels) + " channels");
    }
    if (local.index->empty()) {
        return global;
    }
    const VoxelIndex &gi = *global.index;
    const VoxelIndex &li = *local.index;

    std::vector<int> hidden_rows(li.size());
    for (std::size_t i = 0; i < li.size(); ++i) {
        hidden_rows[i] = gi.find(li.coords()[i]);
    }
    Var h = ops::gather_rows(global.features, hidden_rows);
    Var x = local.features;
    const GridVar hx{local.index, ops::concat_cols({h, x})};
    Var z = sparse_conv_stack(tape, "Mz", cfg.gate_layers, hx, Activation::relu, Activation::sigmoid).features;
    Var r = sparse_conv_stack(tape, "Mr", cfg.gate_layers, hx, Activation::relu, Activation::sigmoid).features;
    const GridVar rhx{local.index, ops::concat_cols({ops::mul(r, h), x})};
    Var cand = sparse_conv_stack(tape, "Mt", cfg.gate_layers, rhx, Activation::relu, Activation::tanh).features;
    Var updated = ops::add(ops::mul(ops::affine(z, -1.0, 1.0), h), ops::mul(z, cand));

    // Merge onto the union of both active sets.
    std::vector<VoxelCoord> coords;
    coords.reserve(gi.size() + li.size());
    std::set_union(gi.coords().begin(), gi.coords().end(), li.coords().begin(), li.coords().end(),
                   std::back_inserter(coords));
    IndexPtr index;
    if (coords.size() == li.size()) {
        index = local.index;
    } else if (coords.size() == gi.size()) {
        index = global.index;
    } else {
        index = make_index(gi.lattice(), coords);
    }
    ops::RowSource from_global{global.features, {}, {}};
    ops::RowSource from_local{updated, {}, {}};
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const int l = li.find(coords[i]);
        if (l >= 0) {
            from_local.src_rows.push_back(l);
            from_local.dst_rows.push_back(static_cast<int>(i));
        } else {
            from_global.src_rows.push_back(gi.find(coords[i]));
            from_global.dst_rows.push_back(static_cast<int>(i));
        }
    }
    std::vector<ops::RowSource> sources{from_local};
    if (!from_global.src_rows.empty()) {
        sources.push_back(from_global);
    }
    return {index, ops::assemble_rows(static_cast<int>(coords.size()), cfg.channels, std::move(sources))};
}

GridVar prune_grid(const GridVar &grid, const DensityProbe &probe, double gamma, int samples_per_axis,
                   std::vector<VoxelCoord> *removed) {
    const std::vector<char> drop = prune_mask(*grid.index, probe, gamma, samples_per_axis);
    std::vector<int> rows;
    std::vector<VoxelCoord> coords;
    for (std::size_t i = 0; i < drop.size(); ++i) {
        if (!drop[i]) {
            rows.push_back(static_cast<int>(i));
            coords.push_back(grid.index->coords()[i]);
        } else if (removed) {
            removed->push_back(grid.index->coords()[i]);
        }
    }
    if (coords.size() == grid.index->size()) {
        return grid;
    }
    return {make_index(grid.index->lattice(), std::move(coords)), ops::gather_rows(grid.features, std::move(rows))};
}

std::vector<CameraView> neighborhood(std::span<const CameraView> frames, int t, const NeighborConfig &cfg) {
    std::vector<CameraPose> poses;
    for (const CameraView &v : frames) {
        poses.push_back(v.pose);
    }
    NeighborConfig c = cfg;
    c.count = std::min<int>(cfg.count, static_cast<int>(frames.size()) - (cfg.include_self ? 0 : 1));
    std::vector<CameraView> out;
    for (int i : select_neighbor_views(t, poses, c)) {
        out.push_back(frames[static_cast<std::size_t>(i)]);
    }
    return out;
}

FusionState fuse_sequence(std::span<const CameraView> frames, const ParameterStore &params, const ModelConfig &cfg,
                          const Lattice &lattice, const SequenceConfig &seq, FusionState state,
                          const FusionObserver &observer, Precision precision, int first, int last) {
    if (frames.empty()) {
        throw std::invalid_argument("fuse_sequence: no frames");
    }
    if (!state.global.index) {
        state.global = SparseVoxelGrid(GridSpec{lattice, cfg.channels});
    }
    const int n = static_cast<int>(frames.size());
    last = last < 0 ? n : std::min(last, n);
    for (int t = std::max(0, first); t < last; ++t) {
        const auto start = std::chrono::steady_clock::now();
        Tape tape(precision);
        tape.bind(params, {""});
        const std::vector<CameraView> views = neighborhood(frames, t, seq.neighbors);
        GridVar local = build_local_volume(tape, cfg, views, lattice, seq.frustum);
        GridVar fused = fuse_step(tape, cfg, constant_grid(tape, state.global), local);
        FusionStep step;
        step.position = t;
        step.frame_index = frames[static_cast<std::size_t>(t)].frame_index;
        state.global = detach(fused);
        ++state.frames_fused;
        if (seq.prune.enabled && state.frames_fused % std::max(1, seq.prune.stride) == 0 && state.global.size() > 0) {
            const DensityProbe probe = make_density_probe(state.global, params, cfg, precision);
            PruneResult pr = prune(state.global, probe, seq.prune.gamma, seq.prune.samples_per_axis);
            step.removed = std::move(pr.removed);
            state.global = std::move(pr.grid);
        }
        step.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (observer) {
            step.local = detach(local);
            step.fused = state.global;
            observer(step);
        }
    }
    return state;
}

} // namespace voxfuse
