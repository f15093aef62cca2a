// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/sparse_grid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace voxfuse {

VoxelCoord Lattice::world_to_voxel(const Vec3 &x) const {
    const Vec3 g = (x - origin) / voxel_size;
    return {static_cast<std::int32_t>(std::floor(g.x())), static_cast<std::int32_t>(std::floor(g.y())),
            static_cast<std::int32_t>(std::floor(g.z()))};
}

Vec3 Lattice::voxel_center(const VoxelCoord &c) const {
    return origin + Vec3(c.x + 0.5, c.y + 0.5, c.z + 0.5) * voxel_size;
}

Vec3 Lattice::voxel_min(const VoxelCoord &c) const { return origin + Vec3(c.x, c.y, c.z) * voxel_size; }

void GridSpec::validate() const {
    if (!(lattice.voxel_size > 0.0) || !std::isfinite(lattice.voxel_size)) {
        throw std::invalid_argument("GridSpec: voxel_size must be positive");
    }
    if (channels < 1) {
        throw std::invalid_argument("GridSpec: channels must be >= 1");
    }
}

VoxelCoord stencil_offset(int k) { return {k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1}; }

VoxelIndex::VoxelIndex(Lattice lattice, std::vector<VoxelCoord> coords) : lattice_(lattice), coords_(std::move(coords)) {
    if (!(lattice_.voxel_size > 0.0)) {
        throw std::invalid_argument("VoxelIndex: voxel_size must be positive");
    }
    rows_.reserve(coords_.size());
    for (std::size_t i = 0; i < coords_.size(); ++i) {
        if (i > 0 && !(coords_[i - 1] < coords_[i])) {
            throw std::invalid_argument("VoxelIndex: coordinates must be sorted and unique");
        }
        rows_.emplace(coords_[i], static_cast<int>(i));
    }
    if (!coords_.empty()) {
        min_ = max_ = coords_.front();
        for (const VoxelCoord &c : coords_) {
            min_ = {std::min(min_.x, c.x), std::min(min_.y, c.y), std::min(min_.z, c.z)};
            max_ = {std::max(max_.x, c.x), std::max(max_.y, c.y), std::max(max_.z, c.z)};
        }
    }
}

int VoxelIndex::find(const VoxelCoord &c) const {
    auto it = rows_.find(c);
    return it == rows_.end() ? -1 : it->second;
}

const std::array<VoxelIndex::RulebookEntry, kStencilSize> &VoxelIndex::rulebook() const {
    std::call_once(rulebook_once_, [this] {
        for (int k = 0; k < kStencilSize; ++k) {
            const VoxelCoord off = stencil_offset(k);
            RulebookEntry &e = rulebook_[static_cast<std::size_t>(k)];
            for (std::size_t i = 0; i < coords_.size(); ++i) {
                const int j = find(coords_[i] + off);
                if (j >= 0) {
                    e.out_rows.push_back(static_cast<int>(i));
                    e.in_rows.push_back(j);
                }
            }
        }
    });
    return rulebook_;
}

IndexPtr make_index(const Lattice &lattice, std::vector<VoxelCoord> coords) {
    std::sort(coords.begin(), coords.end());
    if (std::adjacent_find(coords.begin(), coords.end()) != coords.end()) {
        throw std::invalid_argument("make_index: duplicate voxel coordinate");
    }
    return std::make_shared<const VoxelIndex>(lattice, std::move(coords));
}

SparseVoxelGrid::SparseVoxelGrid(IndexPtr idx, Tensor feats) : index(std::move(idx)), features(std::move(feats)) {
    if (!index) {
        throw std::invalid_argument("SparseVoxelGrid: null index");
    }
    if (static_cast<std::size_t>(features.rows) != index->size()) {
        throw std::invalid_argument("SparseVoxelGrid: feature rows do not match active voxel count");
    }
}

SparseVoxelGrid::SparseVoxelGrid(const GridSpec &spec)
    : index(make_index(spec.lattice, {})), features(0, spec.channels) {
    spec.validate();
}

std::span<const double> SparseVoxelGrid::feature(const VoxelCoord &c) const {
    const int r = index->find(c);
    if (r < 0) {
        return {};
    }
    return features.row(r);
}

SparseVoxelGrid SparseVoxelGrid::from_cells(const GridSpec &spec,
                                            const std::vector<std::pair<VoxelCoord, std::vector<double>>> &cells) {
    spec.validate();
    std::vector<std::pair<VoxelCoord, const std::vector<double> *>> sorted;
    sorted.reserve(cells.size());
    for (const auto &[c, f] : cells) {
        if (static_cast<int>(f.size()) != spec.channels) {
            throw std::invalid_argument("from_cells: feature length does not match channel count");
        }
        for (double v : f) {
            if (!std::isfinite(v)) {
                throw std::invalid_argument("from_cells: non-finite feature value");
            }
        }
        sorted.emplace_back(c, &f);
    }
    std::sort(sorted.begin(), sorted.end(), [](const auto &a, const auto &b) { return a.first < b.first; });
    std::vector<VoxelCoord> coords;
    Tensor feats(static_cast<int>(sorted.size()), spec.channels);
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        coords.push_back(sorted[i].first);
        std::copy(sorted[i].second->begin(), sorted[i].second->end(), feats.row(static_cast<int>(i)).begin());
    }
    return {make_index(spec.lattice, std::move(coords)), std::move(feats)};
}

GridVar constant_grid(Tape &tape, const SparseVoxelGrid &grid) { return {grid.index, tape.constant(grid.features)}; }

GridVar variable_grid(Tape &tape, const SparseVoxelGrid &grid) { return {grid.index, tape.variable(grid.features)}; }

SparseVoxelGrid detach(const GridVar &grid) { return {grid.index, grid.features.value()}; }

GridVar empty_grid(Tape &tape, const Lattice &lattice, int channels) {
    return {make_index(lattice, {}), tape.constant(Tensor(0, channels))};
}

TrilinearStencil trilinear_stencil(const VoxelIndex &index, const Vec3 &x) {
    const Lattice &lat = index.lattice();
    const Vec3 g = (x - lat.origin) / lat.voxel_size - Vec3::Constant(0.5);
    const Vec3 base = g.array().floor();
    const Vec3 f = g - base;
    const VoxelCoord b{static_cast<std::int32_t>(base.x()), static_cast<std::int32_t>(base.y()),
                       static_cast<std::int32_t>(base.z())};
    TrilinearStencil s;
    for (int corner = 0; corner < 8; ++corner) {
        const int dx = corner & 1;
        const int dy = (corner >> 1) & 1;
        const int dz = (corner >> 2) & 1;
        const double w = (dx ? f.x() : 1.0 - f.x()) * (dy ? f.y() : 1.0 - f.y()) * (dz ? f.z() : 1.0 - f.z());
        const int row = index.find({b.x + dx, b.y + dy, b.z + dz});
        s.rows[static_cast<std::size_t>(corner)] = row;
        s.weights[static_cast<std::size_t>(corner)] = w;
        s.empty = s.empty && row < 0;
    }
    return s;
}

TrilinearSample trilinear_sample(const SparseVoxelGrid &grid, const Vec3 &x) {
    const TrilinearStencil s = trilinear_stencil(*grid.index, x);
    TrilinearSample out{std::vector<double>(static_cast<std::size_t>(grid.features.cols), 0.0), s.empty};
    for (int corner = 0; corner < 8; ++corner) {
        const int row = s.rows[static_cast<std::size_t>(corner)];
        if (row < 0) {
            continue;
        }
        const double w = s.weights[static_cast<std::size_t>(corner)];
        auto f = grid.features.row(row);
        for (std::size_t c = 0; c < out.feature.size(); ++c) {
            out.feature[c] += w * f[c];
        }
    }
    return out;
}

Var trilinear_sample(const GridVar &grid, std::span<const Vec3> points, std::vector<char> *empty_flags) {
    const Tensor &feats = grid.features.value();
    const int channels = feats.cols;
    std::vector<TrilinearStencil> stencils;
    stencils.reserve(points.size());
    Tensor out(static_cast<int>(points.size()), channels);
    if (empty_flags) {
        empty_flags->assign(points.size(), 1);
    }
    for (std::size_t p = 0; p < points.size(); ++p) {
        stencils.push_back(trilinear_stencil(*grid.index, points[p]));
        const TrilinearStencil &s = stencils.back();
        if (empty_flags) {
            (*empty_flags)[p] = s.empty ? 1 : 0;
        }
        auto o = out.row(static_cast<int>(p));
        for (int corner = 0; corner < 8; ++corner) {
            const int row = s.rows[static_cast<std::size_t>(corner)];
            if (row < 0) {
                continue;
            }
            const double w = s.weights[static_cast<std::size_t>(corner)];
            auto f = feats.row(row);
            for (int c = 0; c < channels; ++c) {
                o[c] += w * f[c];
            }
        }
    }
    Var src = grid.features;
    return src.tape->record(std::move(out), {src}, [src, stencils = std::move(stencils)](Tape &tape, const Tensor &g) {
        Tensor &gf = tape.grad_buffer(src);
        const int channels = g.cols;
        for (std::size_t p = 0; p < stencils.size(); ++p) {
            const TrilinearStencil &s = stencils[p];
            auto gp = g.row(static_cast<int>(p));
            for (int corner = 0; corner < 8; ++corner) {
                const int row = s.rows[static_cast<std::size_t>(corner)];
                if (row < 0) {
                    continue;
                }
                const double w = s.weights[static_cast<std::size_t>(corner)];
                auto dst = gf.row(row);
                for (int c = 0; c < channels; ++c) {
                    dst[c] += w * gp[c];
                }
            }
        }
    });
}

std::vector<Vec3> stratified_points(const Lattice &lattice, const VoxelCoord &c, int m) {
    std::vector<Vec3> pts;
    pts.reserve(static_cast<std::size_t>(m * m * m));
    const Vec3 lo = lattice.voxel_min(c);
    const double step = lattice.voxel_size / m;
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < m; ++j) {
            for (int k = 0; k < m; ++k) {
                pts.push_back(lo + Vec3(i + 0.5, j + 0.5, k + 0.5) * step);
            }
        }
    }
    return pts;
}

std::vector<char> prune_mask(const VoxelIndex &index, const DensityProbe &probe, double gamma, int m) {
    if (!(gamma > 0.0 && gamma < 1.0)) {
        throw std::invalid_argument("prune: gamma must lie in (0,1)");
    }
    if (m < 1) {
        throw std::invalid_argument("prune: need at least one sample per axis");
    }
    const std::size_t per_voxel = static_cast<std::size_t>(m) * m * m;
    std::vector<char> removed(index.size(), 0);
    // Probe in bounded chunks of whole voxels.
    const std::size_t voxels_per_chunk = std::max<std::size_t>(1, 16384 / per_voxel);
    std::vector<Vec3> pts;
    for (std::size_t start = 0; start < index.size(); start += voxels_per_chunk) {
        const std::size_t end = std::min(index.size(), start + voxels_per_chunk);
        pts.clear();
        for (std::size_t v = start; v < end; ++v) {
            auto vp = stratified_points(index.lattice(), index.coords()[v], m);
            pts.insert(pts.end(), vp.begin(), vp.end());
        }
        const std::vector<double> sigma = probe(pts);
        if (sigma.size() != pts.size()) {
            throw std::runtime_error("prune: density probe returned the wrong number of values");
        }
        for (std::size_t v = start; v < end; ++v) {
            double min_transmittance = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < per_voxel; ++i) {
                min_transmittance = std::min(min_transmittance, std::exp(-sigma[(v - start) * per_voxel + i]));
            }
            removed[v] = min_transmittance > gamma ? 1 : 0;
        }
    }
    return removed;
}

PruneResult prune(const SparseVoxelGrid &grid, const DensityProbe &probe, double gamma, int m) {
    const std::vector<char> removed = prune_mask(*grid.index, probe, gamma, m);
    PruneResult result;
    std::vector<VoxelCoord> kept;
    for (std::size_t i = 0; i < removed.size(); ++i) {
        if (removed[i]) {
            result.removed.push_back(grid.index->coords()[i]);
        } else {
            kept.push_back(grid.index->coords()[i]);
            result.kept_rows.push_back(static_cast<int>(i));
        }
    }
    Tensor feats(static_cast<int>(kept.size()), grid.features.cols);
    for (std::size_t i = 0; i < result.kept_rows.size(); ++i) {
        auto src = grid.features.row(result.kept_rows[i]);
        std::copy(src.begin(), src.end(), feats.row(static_cast<int>(i)).begin());
    }
    result.grid = SparseVoxelGrid(std::make_shared<const VoxelIndex>(grid.index->lattice(), std::move(kept)), std::move(feats));
    return result;
}

SparseVoxelGrid subdivide(const SparseVoxelGrid &grid, std::vector<int> *child_parent) {
    const auto &parents = grid.index->coords();
    std::vector<std::pair<VoxelCoord, int>> children;
    children.reserve(parents.size() * 8);
    for (std::size_t p = 0; p < parents.size(); ++p) {
        const VoxelCoord &c = parents[p];
        for (int d = 0; d < 8; ++d) {
            children.push_back({{2 * c.x + (d & 1), 2 * c.y + ((d >> 1) & 1), 2 * c.z + ((d >> 2) & 1)}, static_cast<int>(p)});
        }
    }
    std::sort(children.begin(), children.end(), [](const auto &a, const auto &b) { return a.first < b.first; });
    Lattice fine = grid.index->lattice();
    fine.voxel_size *= 0.5;
    std::vector<VoxelCoord> coords;
    coords.reserve(children.size());
    Tensor feats(static_cast<int>(children.size()), grid.features.cols);
    if (child_parent) {
        child_parent->clear();
    }
    for (std::size_t i = 0; i < children.size(); ++i) {
        coords.push_back(children[i].first);
        auto src = grid.features.row(children[i].second);
        std::copy(src.begin(), src.end(), feats.row(static_cast<int>(i)).begin());
        if (child_parent) {
            child_parent->push_back(children[i].second);
        }
    }
    return {std::make_shared<const VoxelIndex>(fine, std::move(coords)), std::move(feats)};
}

OverlapSplit overlap_split(const VoxelIndex &global, const VoxelIndex &local) {
    if (!(global.lattice() == local.lattice())) {
        throw std::invalid_argument("overlap_split: grids live on different lattices");
    }
    OverlapSplit out;
    const auto &g = global.coords();
    const auto &l = local.coords();
    std::set_intersection(g.begin(), g.end(), l.begin(), l.end(), std::back_inserter(out.overlap));
    std::set_difference(l.begin(), l.end(), g.begin(), g.end(), std::back_inserter(out.local_only));
    std::set_difference(g.begin(), g.end(), l.begin(), l.end(), std::back_inserter(out.global_only));
    return out;
}

} // namespace voxfuse
