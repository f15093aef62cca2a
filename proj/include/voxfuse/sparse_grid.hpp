// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/tape.hpp"
#include "voxfuse/tensor.hpp"

#include <array>
#include <compare>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <unordered_map>
#include <vector>

namespace voxfuse {

struct VoxelCoord {
    std::int32_t x = 0;
    std::int32_t y = 0;
    std::int32_t z = 0;

    auto operator<=>(const VoxelCoord &) const = default;
    VoxelCoord operator+(const VoxelCoord &o) const { return {x + o.x, y + o.y, z + o.z}; }
};

struct VoxelCoordHash {
    std::size_t operator()(const VoxelCoord &c) const noexcept {
        std::uint64_t h = static_cast<std::uint32_t>(c.x);
        h = h * 0x9E3779B97F4A7C15ULL ^ static_cast<std::uint32_t>(c.y);
        h = h * 0x9E3779B97F4A7C15ULL ^ static_cast<std::uint32_t>(c.z);
        h ^= h >> 29;
        h *= 0xBF58476D1CE4E5B9ULL;
        h ^= h >> 32;
        return static_cast<std::size_t>(h);
    }
};

/// Placement of the voxel lattice in world space.
struct Lattice {
    Vec3 origin = Vec3::Zero();
    double voxel_size = 1.0;

    VoxelCoord world_to_voxel(const Vec3 &x) const;
    Vec3 voxel_center(const VoxelCoord &c) const;
    Vec3 voxel_min(const VoxelCoord &c) const;
    bool operator==(const Lattice &) const = default;
};

struct GridSpec {
    Lattice lattice;
    int channels = 16;

    void validate() const;
    bool operator==(const GridSpec &) const = default;
};

/// Offsets of the 3x3x3 stencil; offset k is (dx,dy,dz) with
/// k = 9(dx+1) + 3(dy+1) + (dz+1), so the center tap is 13.
constexpr int kStencilSize = 27;
constexpr int kStencilCenter = 13;
VoxelCoord stencil_offset(int k);

/// Immutable active voxel set in canonical (lexicographic x,y,z) order.
/// Row i of any feature tensor over this index belongs to coords()[i].
class VoxelIndex {
  public:
    /// Pairs (output row, input row) for one stencil offset.
    struct RulebookEntry {
        std::vector<int> out_rows;
        std::vector<int> in_rows;
    };

    VoxelIndex(Lattice lattice, std::vector<VoxelCoord> coords);

    const Lattice &lattice() const { return lattice_; }
    const std::vector<VoxelCoord> &coords() const { return coords_; }
    std::size_t size() const { return coords_.size(); }
    bool empty() const { return coords_.empty(); }
    /// Row of c, or -1 when c is not active.
    int find(const VoxelCoord &c) const;
    bool contains(const VoxelCoord &c) const { return find(c) >= 0; }
    /// Inclusive coordinate bounds; meaningless for an empty index.
    VoxelCoord min_coord() const { return min_; }
    VoxelCoord max_coord() const { return max_; }

    /// Neighbor pairs per stencil offset, built once on first use.
    const std::array<RulebookEntry, kStencilSize> &rulebook() const;

  private:
    Lattice lattice_;
    std::vector<VoxelCoord> coords_;
    std::unordered_map<VoxelCoord, int, VoxelCoordHash> rows_;
    VoxelCoord min_{};
    VoxelCoord max_{};
    mutable std::once_flag rulebook_once_;
    mutable std::array<RulebookEntry, kStencilSize> rulebook_;
};

using IndexPtr = std::shared_ptr<const VoxelIndex>;

IndexPtr make_index(const Lattice &lattice, std::vector<VoxelCoord> coords);

/// Sparse voxel grid with one C-channel feature row per active voxel.
struct SparseVoxelGrid {
    IndexPtr index;
    Tensor features;

    SparseVoxelGrid() = default;
    SparseVoxelGrid(IndexPtr idx, Tensor feats);
    /// Empty grid on the given spec.
    explicit SparseVoxelGrid(const GridSpec &spec);

    GridSpec spec() const { return {index->lattice(), features.cols}; }
    std::size_t size() const { return index->size(); }
    /// Feature row of c, or an empty span if c is not active.
    std::span<const double> feature(const VoxelCoord &c) const;
    /// Builds a grid from (coord, feature) pairs; duplicate coords and ragged
    /// or non-finite features are rejected.
    static SparseVoxelGrid from_cells(const GridSpec &spec,
                                      const std::vector<std::pair<VoxelCoord, std::vector<double>>> &cells);
};

/// Grid whose features live on a tape.
struct GridVar {
    IndexPtr index;
    Var features;

    std::size_t size() const { return index->size(); }
};

GridVar constant_grid(Tape &tape, const SparseVoxelGrid &grid);
GridVar variable_grid(Tape &tape, const SparseVoxelGrid &grid);
SparseVoxelGrid detach(const GridVar &grid);
/// A grid with no voxels and the given channel width.
GridVar empty_grid(Tape &tape, const Lattice &lattice, int channels);

/// Interpolation stencil of one point over the voxel-center lattice.
struct TrilinearStencil {
    std::array<int, 8> rows{};       // active row per corner, -1 if absent
    std::array<double, 8> weights{}; // corner order: bit0 -> +x, bit1 -> +y, bit2 -> +z
    bool empty = true;               // all eight corners absent
};

TrilinearStencil trilinear_stencil(const VoxelIndex &index, const Vec3 &x);

struct TrilinearSample {
    std::vector<double> feature;
    bool empty = true;
};

/// Trilinear interpolation among the 8 surrounding voxel centers. Absent
/// voxels contribute zero with their usual weight (no renormalization).
TrilinearSample trilinear_sample(const SparseVoxelGrid &grid, const Vec3 &x);

/// Taped batch version; returns P x C. empty_flags (optional) receives one
/// flag per point.
Var trilinear_sample(const GridVar &grid, std::span<const Vec3> points, std::vector<char> *empty_flags = nullptr);

/// Batched density probe: world points -> sigma.
using DensityProbe = std::function<std::vector<double>(std::span<const Vec3>)>;

struct PruneResult {
    SparseVoxelGrid grid;
    std::vector<VoxelCoord> removed;
    /// Surviving rows of the input grid, in order.
    std::vector<int> kept_rows;
};

/// Points of an m x m x m stratified lattice inside voxel c.
std::vector<Vec3> stratified_points(const Lattice &lattice, const VoxelCoord &c, int m);

/// One flag per voxel, set when the voxel is removed: min_i exp(-sigma(v_i))
/// > gamma over its stratified sample points.
std::vector<char> prune_mask(const VoxelIndex &index, const DensityProbe &probe, double gamma, int m);

PruneResult prune(const SparseVoxelGrid &grid, const DensityProbe &probe, double gamma, int m = 2);

/// Splits every voxel into 8 children at half the voxel size, copying the
/// parent feature (nearest neighbor). child_parent receives, per child row,
/// the parent row it was copied from.
SparseVoxelGrid subdivide(const SparseVoxelGrid &grid, std::vector<int> *child_parent = nullptr);

struct OverlapSplit {
    std::vector<VoxelCoord> overlap;
    std::vector<VoxelCoord> local_only;
    std::vector<VoxelCoord> global_only;
};

/// Exact partition of the union of two active sets. Throws
/// std::invalid_argument when the lattices differ.
OverlapSplit overlap_split(const VoxelIndex &global, const VoxelIndex &local);

} // namespace voxfuse
