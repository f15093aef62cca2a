// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

// A two-frame, at most 4x4x4-voxel instance of the full pipeline: local
// reconstruction of both frames, two fusion steps, rendering of local and
// global volumes, and the fusion loss.

#pragma once

#include "voxfuse/fusion.hpp"
#include "voxfuse/local_reconstruction.hpp"
#include "voxfuse/ops.hpp"
#include "voxfuse/renderer.hpp"
#include "voxfuse/training.hpp"

#include "support/check.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

namespace voxfuse::testing {

struct EndToEndInstance {
    ModelConfig cfg = tiny_model();
    ParameterStore params;
    std::vector<CameraView> views;
    Lattice lattice{Vec3(-0.2, -0.2, 0.4), 0.1};
    FrustumConfig frustum;
    std::vector<std::vector<Ray>> rays;
    std::vector<Tensor> targets;
    RenderConfig render;
};

inline EndToEndInstance make_end_to_end_instance(std::uint64_t seed) {
    EndToEndInstance e;
    Rng rng(seed);
    e.params = init_model(e.cfg, seed);
    // keep the decoder from starting fully transparent
    e.params.set("R.density.0.bias", Tensor(1, 1, 1.0));
    e.views = {random_view(0, rng, 6), random_view(1, rng, 6)};
    e.frustum.max_depth = 1.0;
    e.frustum.bounds = Aabb{Vec3(-0.2, -0.2, 0.4), Vec3(0.2, 0.2, 0.8)};
    e.render.sampling.per_voxel = 2;
    std::vector<int> pixels(36);
    std::iota(pixels.begin(), pixels.end(), 0);
    for (const CameraView &v : e.views) {
        e.rays.push_back(pixel_rays(v.intrinsics, v.pose, pixels));
        e.targets.push_back(random_tensor(36, 3, rng, 0.0, 1.0));
    }
    return e;
}

/// Loss of the instance; with grads set, also its parameter gradients.
inline double end_to_end_loss(const EndToEndInstance &e, const ParameterStore &params, Gradients *grads = nullptr,
                              std::size_t *voxels = nullptr) {
    Tape t;
    t.bind(params);
    GridVar global = empty_grid(t, e.lattice, e.cfg.channels);
    std::vector<FrameRenders> frames;
    for (int f = 0; f < 2; ++f) {
        const std::vector<CameraView> views = {e.views[static_cast<std::size_t>(f)],
                                               e.views[static_cast<std::size_t>(1 - f)]};
        const GridVar local = build_local_volume(t, e.cfg, views, e.lattice, e.frustum);
        global = fuse_step(t, e.cfg, global, local);
        const auto &rays = e.rays[static_cast<std::size_t>(f)];
        frames.push_back({ops::slice_cols(render_rays(t, e.cfg, local, rays, e.render), 0, 3),
                          ops::slice_cols(render_rays(t, e.cfg, global, rays, e.render), 0, 3),
                          e.targets[static_cast<std::size_t>(f)]});
    }
    if (voxels) {
        *voxels = global.size();
    }
    Var loss = loss_fuse(frames);
    if (grads) {
        t.backward(loss);
        *grads = t.parameter_gradients();
    }
    return loss.value().data[0];
}

struct GradientReport {
    std::string name;
    double relative_error = 0.0;
};

/// Analytic vs central-difference gradients for every parameter tensor of
/// the instance, probing at most `per_tensor` entries of each.
inline std::vector<GradientReport> end_to_end_gradient_check(std::uint64_t seed, int per_tensor, double h = 1e-4) {
    const EndToEndInstance e = make_end_to_end_instance(seed);
    Gradients grads;
    end_to_end_loss(e, e.params, &grads);
    Rng rng(seed + 1);
    std::vector<GradientReport> out;
    for (const auto &[name, value] : e.params.all()) {
        std::vector<std::size_t> idx(value.data.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(per_tensor)));
        Tensor v = value;
        const std::vector<double> numeric = numeric_gradient_at(
            [&] {
                ParameterStore q = e.params;
                q.set(name, v);
                return end_to_end_loss(e, q);
            },
            v, idx, h);
        Tensor a(1, static_cast<int>(idx.size()));
        Tensor n(1, static_cast<int>(idx.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            a.data[i] = grads.at(name).data[idx[i]];
            n.data[i] = numeric[i];
        }
        out.push_back({name, relative_error(a, n)});
    }
    return out;
}

} // namespace voxfuse::testing
