// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

// Straightforward reference implementations the library is checked against.

#pragma once

#include "voxfuse/camera.hpp"
#include "voxfuse/image.hpp"
#include "voxfuse/parameters.hpp"
#include "voxfuse/sparse_grid.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace voxfuse::oracle {

/// Dense zero-padded 3x3x3 convolution evaluated at the active voxels.
inline Tensor dense_conv(const SparseVoxelGrid &g, const Tensor &weight, const Tensor &bias) {
    const int cin = g.features.cols;
    const int cout = weight.cols;
    Tensor out(static_cast<int>(g.size()), cout);
    for (std::size_t r = 0; r < g.size(); ++r) {
        const VoxelCoord c = g.index->coords()[r];
        for (int co = 0; co < cout; ++co) {
            double s = bias(0, co);
            for (int dx = -1; dx <= 1; ++dx) {
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dz = -1; dz <= 1; ++dz) {
                        const auto f = g.feature({c.x + dx, c.y + dy, c.z + dz});
                        if (f.empty()) {
                            continue;
                        }
                        const int k = 9 * (dx + 1) + 3 * (dy + 1) + (dz + 1);
                        for (int ci = 0; ci < cin; ++ci) {
                            s += f[static_cast<std::size_t>(ci)] * weight(k * cin + ci, co);
                        }
                    }
                }
            }
            out(static_cast<int>(r), co) = s;
        }
    }
    return out;
}

inline double apply(const std::string &act, double v) {
    if (act == "relu") {
        return std::max(0.0, v);
    }
    if (act == "sigmoid") {
        return 1.0 / (1.0 + std::exp(-v));
    }
    if (act == "tanh") {
        return std::tanh(v);
    }
    return v;
}

/// Stack of dense convolutions "<prefix>.<i>" with activations between.
inline Tensor dense_conv_stack(const SparseVoxelGrid &g, const ParameterStore &p, const std::string &prefix,
                               int layers, const std::string &hidden, const std::string &output) {
    SparseVoxelGrid x = g;
    for (int i = 0; i < layers; ++i) {
        const std::string base = prefix + "." + std::to_string(i);
        Tensor y = dense_conv(x, p.get(base + ".weight"), p.get(base + ".bias"));
        for (double &v : y.data) {
            v = apply(i + 1 < layers ? hidden : output, v);
        }
        x = SparseVoxelGrid(g.index, std::move(y));
    }
    return x.features;
}

/// Scalar per-voxel GRU update over the local active set; the result covers
/// the union of both sets in canonical order.
inline SparseVoxelGrid gru_fuse(const SparseVoxelGrid &global, const SparseVoxelGrid &local, const ParameterStore &p,
                                int gate_layers) {
    const int c = local.features.cols;
    const IndexPtr lidx = local.index;
    const int n = static_cast<int>(lidx->size());
    Tensor h(n, c);
    for (int i = 0; i < n; ++i) {
        const auto g = global.index ? global.feature(lidx->coords()[static_cast<std::size_t>(i)])
                                    : std::span<const double>{};
        for (int k = 0; k < c && !g.empty(); ++k) {
            h(i, k) = g[static_cast<std::size_t>(k)];
        }
    }
    auto concat = [&](const Tensor &a) {
        Tensor t(n, 2 * c);
        for (int i = 0; i < n; ++i) {
            for (int k = 0; k < c; ++k) {
                t(i, k) = a(i, k);
                t(i, c + k) = local.features(i, k);
            }
        }
        return SparseVoxelGrid(lidx, t);
    };
    const Tensor z = dense_conv_stack(concat(h), p, "Mz", gate_layers, "relu", "sigmoid");
    const Tensor r = dense_conv_stack(concat(h), p, "Mr", gate_layers, "relu", "sigmoid");
    Tensor rh(n, c);
    for (std::size_t i = 0; i < rh.data.size(); ++i) {
        rh.data[i] = r.data[i] * h.data[i];
    }
    const Tensor cand = dense_conv_stack(concat(rh), p, "Mt", gate_layers, "relu", "tanh");

    std::vector<std::pair<VoxelCoord, std::vector<double>>> cells;
    for (int i = 0; i < n; ++i) {
        std::vector<double> v(static_cast<std::size_t>(c));
        for (int k = 0; k < c; ++k) {
            v[static_cast<std::size_t>(k)] = (1.0 - z(i, k)) * h(i, k) + z(i, k) * cand(i, k);
        }
        cells.push_back({lidx->coords()[static_cast<std::size_t>(i)], v});
    }
    if (global.index) {
        for (std::size_t i = 0; i < global.size(); ++i) {
            const VoxelCoord vc = global.index->coords()[i];
            if (!lidx->contains(vc)) {
                const auto row = global.features.row(static_cast<int>(i));
                cells.push_back({vc, {row.begin(), row.end()}});
            }
        }
    }
    return SparseVoxelGrid::from_cells({lidx->lattice(), c}, cells);
}

struct CompositeOut {
    std::array<double, 3> rgb{};
    double depth = 0.0;
    double transmittance = 1.0;
};

/// Sequential front-to-back accumulation.
inline CompositeOut composite(const std::vector<double> &t, const std::vector<double> &delta,
                              const std::vector<double> &sigma, const std::vector<std::array<double, 3>> &rgb,
                              const std::array<double, 3> &background) {
    CompositeOut o;
    double trans = 1.0;
    double wsum = 0.0;
    double dsum = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double alpha = 1.0 - std::exp(-sigma[i] * delta[i]);
        const double w = trans * alpha;
        for (int k = 0; k < 3; ++k) {
            o.rgb[static_cast<std::size_t>(k)] += w * rgb[i][static_cast<std::size_t>(k)];
        }
        wsum += w;
        dsum += w * t[i];
        trans *= 1.0 - alpha;
    }
    for (int k = 0; k < 3; ++k) {
        o.rgb[static_cast<std::size_t>(k)] += trans * background[static_cast<std::size_t>(k)];
    }
    o.depth = dsum / std::max(wsum, 1e-6);
    o.transmittance = trans;
    return o;
}

struct BoxHit {
    VoxelCoord coord;
    double t_enter = 0.0;
    double t_exit = 0.0;
};

/// Slab test of the ray against every active voxel, sorted by entry.
inline std::vector<BoxHit> ray_voxel_hits(const Ray &ray, const VoxelIndex &index, double near, double far) {
    std::vector<BoxHit> hits;
    const Lattice &lat = index.lattice();
    for (const VoxelCoord &c : index.coords()) {
        const Vec3 lo = lat.voxel_min(c);
        const Vec3 hi = lo + Vec3::Constant(lat.voxel_size);
        double t0 = near;
        double t1 = far;
        for (int a = 0; a < 3; ++a) {
            const double d = ray.direction(a);
            if (d == 0.0) {
                if (ray.origin(a) < lo(a) || ray.origin(a) > hi(a)) {
                    t0 = 1.0;
                    t1 = 0.0;
                }
                continue;
            }
            double ta = (lo(a) - ray.origin(a)) / d;
            double tb = (hi(a) - ray.origin(a)) / d;
            if (ta > tb) {
                std::swap(ta, tb);
            }
            t0 = std::max(t0, ta);
            t1 = std::min(t1, tb);
        }
        if (t1 - t0 > 1e-12) {
            hits.push_back({c, t0, t1});
        }
    }
    std::sort(hits.begin(), hits.end(), [](const BoxHit &a, const BoxHit &b) { return a.t_enter < b.t_enter; });
    return hits;
}

inline double mse(const Image &a, const Image &b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rgb.size(); ++i) {
        s += (a.rgb[i] - b.rgb[i]) * (a.rgb[i] - b.rgb[i]);
    }
    return s / static_cast<double>(a.rgb.size());
}

inline double psnr(const Image &a, const Image &b) {
    const double m = mse(a, b);
    return m == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / m);
}

/// Single-scale SSIM written directly from its definition: every 11x11
/// window fully inside the image, Gaussian weights with sigma 1.5.
inline double ssim(const Image &a, const Image &b) {
    auto luma = [](const Image &img, int x, int y) {
        return 0.2126 * img.at(x, y, 0) + 0.7152 * img.at(x, y, 1) + 0.0722 * img.at(x, y, 2);
    };
    double w[11][11];
    double wsum = 0.0;
    for (int i = 0; i < 11; ++i) {
        for (int j = 0; j < 11; ++j) {
            w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
            wsum += w[i][j];
        }
    }
    const double c1 = 0.01 * 0.01;
    const double c2 = 0.03 * 0.03;
    double total = 0.0;
    int count = 0;
    for (int y0 = 0; y0 + 11 <= a.height; ++y0) {
        for (int x0 = 0; x0 + 11 <= a.width; ++x0) {
            double mx = 0, my = 0;
            for (int i = 0; i < 11; ++i) {
                for (int j = 0; j < 11; ++j) {
                    mx += w[i][j] / wsum * luma(a, x0 + j, y0 + i);
                    my += w[i][j] / wsum * luma(b, x0 + j, y0 + i);
                }
            }
            double vx = 0, vy = 0, cov = 0;
            for (int i = 0; i < 11; ++i) {
                for (int j = 0; j < 11; ++j) {
                    const double dx = luma(a, x0 + j, y0 + i) - mx;
                    const double dy = luma(b, x0 + j, y0 + i) - my;
                    vx += w[i][j] / wsum * dx * dx;
                    vy += w[i][j] / wsum * dy * dy;
                    cov += w[i][j] / wsum * dx * dy;
                }
            }
            total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    }
    return total / count;
}

} // namespace voxfuse::oracle
