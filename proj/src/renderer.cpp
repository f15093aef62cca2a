// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/renderer.hpp"

#include "voxfuse/layers.hpp"
#include "voxfuse/ops.hpp"
#include "voxfuse/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace voxfuse {

namespace {

Var directions_var(Tape &tape, std::span<const Vec3> dirs) {
    Tensor d(static_cast<int>(dirs.size()), 3);
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        if (std::abs(dirs[i].norm() - 1.0) > 1e-6) {
            throw std::invalid_argument("decode_radiance: direction is not unit length");
        }
        for (int c = 0; c < 3; ++c) {
            d(static_cast<int>(i), c) = dirs[i](c);
        }
    }
    return tape.constant(std::move(d));
}

Var trunk(Tape &tape, const ModelConfig &cfg, const GridVar &grid, std::span<const Vec3> points) {
    Var f = trilinear_sample(grid, points);
    Var pe = ops::positional_encoding(f, cfg.pe_frequencies);
    return mlp_forward(tape, "R.trunk", cfg.decoder_trunk_layers, pe, Activation::relu, Activation::relu);
}

Var density_head(Tape &tape, const ModelConfig &cfg, Var h) {
    Var s = mlp_forward(tape, "R.density", 1, h, Activation::none, Activation::softplus);
    return cfg.density_scale == 1.0 ? s : ops::affine(s, cfg.density_scale, 0.0);
}

} // namespace

DecodedBatch decode_radiance(Tape &tape, const ModelConfig &cfg, const GridVar &grid, std::span<const Vec3> points,
                             std::span<const Vec3> directions) {
    if (points.size() != directions.size()) {
        throw std::invalid_argument("decode_radiance: point and direction counts differ");
    }
    Var dirs = directions_var(tape, directions);
    Var h = trunk(tape, cfg, grid, points);
    Var sigma = density_head(tape, cfg, h);
    Var rgb = mlp_forward(tape, "R.color", cfg.decoder_color_layers, ops::concat_cols({h, dirs}), Activation::relu,
                          Activation::sigmoid);
    return {sigma, rgb};
}

RadianceOutput decode_radiance(const SparseVoxelGrid &grid, const ParameterStore &params, const ModelConfig &cfg,
                               const Vec3 &x, const Vec3 &d) {
    Tape tape;
    tape.bind(params, {""});
    GridVar g = constant_grid(tape, grid);
    const Vec3 xs[1] = {x};
    const Vec3 ds[1] = {d};
    DecodedBatch out = decode_radiance(tape, cfg, g, xs, ds);
    RadianceOutput r;
    r.sigma = out.sigma.value().data[0];
    for (int c = 0; c < 3; ++c) {
        r.rgb[static_cast<std::size_t>(c)] = out.rgb.value().data[static_cast<std::size_t>(c)];
    }
    return r;
}

DensityProbe make_density_probe(const SparseVoxelGrid &grid, const ParameterStore &params, const ModelConfig &cfg,
                                Precision precision) {
    auto g = std::make_shared<const SparseVoxelGrid>(grid);
    auto p = std::make_shared<const ParameterStore>(params);
    return [g, p, cfg, precision](std::span<const Vec3> pts) {
        Tape tape(precision);
        tape.bind(*p, {""});
        GridVar gv = constant_grid(tape, *g);
        Var sigma = density_head(tape, cfg, trunk(tape, cfg, gv, pts));
        return sigma.value().data;
    };
}

std::vector<VoxelHit> traverse_active(const Ray &ray, const VoxelIndex &index, double near, double far) {
    std::vector<VoxelHit> hits;
    if (index.empty() || !(far > near)) {
        return hits;
    }
    const Lattice &lat = index.lattice();
    const double s = lat.voxel_size;
    const Vec3 lo = lat.voxel_min(index.min_coord());
    const Vec3 hi = lat.voxel_min(index.max_coord()) + Vec3::Constant(s);
    const Vec3 &o = ray.origin;
    const Vec3 &d = ray.direction;

    double t0 = near;
    double t1 = far;
    for (int a = 0; a < 3; ++a) {
        if (d(a) == 0.0) {
            if (o(a) < lo(a) || o(a) > hi(a)) {
                return hits;
            }
            continue;
        }
        double ta = (lo(a) - o(a)) / d(a);
        double tb = (hi(a) - o(a)) / d(a);
        if (ta > tb) {
            std::swap(ta, tb);
        }
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    if (!(t1 > t0)) {
        return hits;
    }

    const VoxelCoord cmin = index.min_coord();
    const VoxelCoord cmax = index.max_coord();
    const Vec3 start = o + d * (t0 + 0.5 * std::min(t1 - t0, 1e-9 * s));
    int cell[3];
    int step[3];
    double t_next[3];
    double t_delta[3];
    const int lo_c[3] = {cmin.x, cmin.y, cmin.z};
    const int hi_c[3] = {cmax.x, cmax.y, cmax.z};
    for (int a = 0; a < 3; ++a) {
        const double g = (start(a) - lat.origin(a)) / s;
        cell[a] = std::clamp(static_cast<int>(std::floor(g)), lo_c[a], hi_c[a]);
        if (d(a) > 0.0) {
            step[a] = 1;
            t_next[a] = (lat.origin(a) + (cell[a] + 1) * s - o(a)) / d(a);
            t_delta[a] = s / d(a);
        } else if (d(a) < 0.0) {
            step[a] = -1;
            t_next[a] = (lat.origin(a) + cell[a] * s - o(a)) / d(a);
            t_delta[a] = -s / d(a);
        } else {
            step[a] = 0;
            t_next[a] = std::numeric_limits<double>::infinity();
            t_delta[a] = std::numeric_limits<double>::infinity();
        }
    }

    double t = t0;
    while (t < t1) {
        int axis = 0;
        if (t_next[1] < t_next[axis]) {
            axis = 1;
        }
        if (t_next[2] < t_next[axis]) {
            axis = 2;
        }
        const double t_exit = std::min(t_next[axis], t1);
        const VoxelCoord c{cell[0], cell[1], cell[2]};
        if (t_exit > t && index.contains(c)) {
            hits.push_back({c, t, t_exit});
        }
        t = std::max(t, t_exit);
        cell[axis] += step[axis];
        t_next[axis] += t_delta[axis];
        if (cell[axis] < lo_c[axis] || cell[axis] > hi_c[axis]) {
            break;
        }
    }
    return hits;
}

std::vector<RaySample> sample_ray(const Ray &ray, const VoxelIndex &index, double near, double far,
                                  const SampleConfig &cfg, Rng *rng) {
    if (!(near >= 0.0) || !(far > near)) {
        throw std::invalid_argument("sample_ray: need 0 <= near < far");
    }
    if (cfg.per_voxel < 1) {
        throw std::invalid_argument("sample_ray: per_voxel must be at least 1");
    }
    if (cfg.jitter && rng == nullptr) {
        throw std::invalid_argument("sample_ray: jitter needs an rng");
    }
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<RaySample> out;
    for (const VoxelHit &h : traverse_active(ray, index, near, far)) {
        const double delta = (h.t_exit - h.t_enter) / cfg.per_voxel;
        for (int j = 0; j < cfg.per_voxel; ++j) {
            const double u = cfg.jitter ? u01(*rng) : 0.5;
            const double t = h.t_enter + (j + u) * delta;
            out.push_back({ray.origin + t * ray.direction, t, delta});
        }
    }
    return out;
}

CompositeResult composite(std::span<const RaySample> samples, std::span<const double> sigma,
                          std::span<const Rgb> rgb, const Rgb &background) {
    if (samples.size() != sigma.size() || samples.size() != rgb.size()) {
        throw std::invalid_argument("composite: sample, sigma and color counts differ");
    }
    CompositeResult r;
    double trans = 1.0;
    double weighted_t = 0.0;
    double weight_sum = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (i > 0 && !(samples[i].t > samples[i - 1].t)) {
            throw std::invalid_argument("composite: samples must be strictly increasing in t");
        }
        const double e = std::exp(-sigma[i] * samples[i].delta);
        const double w = trans * (1.0 - e);
        for (std::size_t c = 0; c < 3; ++c) {
            r.rgb[c] += w * rgb[i][c];
        }
        weighted_t += w * samples[i].t;
        weight_sum += w;
        trans *= e;
    }
    for (std::size_t c = 0; c < 3; ++c) {
        r.rgb[c] += trans * background[c];
    }
    r.transmittance = trans;
    r.opacity = weight_sum;
    r.depth = weighted_t / std::max(weight_sum, kDepthEpsilon);
    return r;
}

Var composite(Var sigma, Var rgb, const RayBatchLayout &layout, const Rgb &background) {
    const Tensor &sv = sigma.value();
    const Tensor &cv = rgb.value();
    const int n = layout.offsets.back();
    if (sv.rows != n || sv.cols != 1 || cv.rows != n || cv.cols != 3 ||
        layout.t.size() != static_cast<std::size_t>(n) || layout.delta.size() != static_cast<std::size_t>(n)) {
        throw std::invalid_argument("composite: layout does not match the decoded samples");
    }
    const int rays = layout.ray_count();
    // Per-sample weights and transmittance after each sample, kept for backward.
    auto weights = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
    auto after = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
    Tensor out(rays, 5);
    for (int r = 0; r < rays; ++r) {
        double trans = 1.0;
        double a = 0.0;
        double w_sum = 0.0;
        double col[3] = {0.0, 0.0, 0.0};
        for (int i = layout.offsets[static_cast<std::size_t>(r)]; i < layout.offsets[static_cast<std::size_t>(r) + 1];
             ++i) {
            const std::size_t si = static_cast<std::size_t>(i);
            const double e = std::exp(-sv.data[si] * layout.delta[si]);
            const double w = trans * (1.0 - e);
            (*weights)[si] = w;
            trans *= e;
            (*after)[si] = trans;
            for (int c = 0; c < 3; ++c) {
                col[c] += w * cv(i, c);
            }
            a += w * layout.t[si];
            w_sum += w;
        }
        for (int c = 0; c < 3; ++c) {
            out(r, c) = col[c] + trans * background[static_cast<std::size_t>(c)];
        }
        out(r, 3) = a / std::max(w_sum, kDepthEpsilon);
        out(r, 4) = trans;
    }

    Tape &tape = *sigma.tape;
    return tape.record(std::move(out), {sigma, rgb}, [=](Tape &tape, const Tensor &g) {
        const Tensor &cv = tape.value(rgb);
        const bool need_s = tape.requires_grad(sigma);
        const bool need_c = tape.requires_grad(rgb);
        Tensor *gs = need_s ? &tape.grad_buffer(sigma) : nullptr;
        Tensor *gc = need_c ? &tape.grad_buffer(rgb) : nullptr;
        for (int r = 0; r < rays; ++r) {
            const int begin = layout.offsets[static_cast<std::size_t>(r)];
            const int end = layout.offsets[static_cast<std::size_t>(r) + 1];
            if (begin == end) {
                continue;
            }
            const double g_rgb[3] = {g(r, 0), g(r, 1), g(r, 2)};
            const double t_final = (*after)[static_cast<std::size_t>(end - 1)];
            double w_sum = 0.0;
            double a = 0.0;
            for (int i = begin; i < end; ++i) {
                w_sum += (*weights)[static_cast<std::size_t>(i)];
                a += (*weights)[static_cast<std::size_t>(i)] * layout.t[static_cast<std::size_t>(i)];
            }
            double g_a = 0.0;
            double g_w = 0.0;
            if (w_sum > kDepthEpsilon) {
                g_a = g(r, 3) / w_sum;
                g_w = -g(r, 3) * a / (w_sum * w_sum);
            } else {
                g_a = g(r, 3) / kDepthEpsilon;
            }
            const double g_bg = g_rgb[0] * background[0] + g_rgb[1] * background[1] + g_rgb[2] * background[2];
            // d/dsigma_k: delta_k [T_{k+1} q_k - sum_{i>k} w_i q_i + T_N (g_w - g_T - g.bg)]
            double suffix = 0.0;
            for (int i = end - 1; i >= begin; --i) {
                const std::size_t si = static_cast<std::size_t>(i);
                const double q = g_rgb[0] * cv(i, 0) + g_rgb[1] * cv(i, 1) + g_rgb[2] * cv(i, 2) + g_a * layout.t[si];
                if (gs) {
                    gs->data[si] += layout.delta[si] *
                                    ((*after)[si] * q - suffix + t_final * (g_w - g(r, 4) - g_bg));
                }
                if (gc) {
                    for (int c = 0; c < 3; ++c) {
                        (*gc)(i, c) += (*weights)[si] * g_rgb[c];
                    }
                }
                suffix += (*weights)[si] * q;
            }
        }
    });
}

std::vector<Ray> pixel_rays(const CameraIntrinsics &k, const CameraPose &pose, std::span<const int> pixels) {
    std::vector<Ray> rays;
    rays.reserve(pixels.size());
    for (int p : pixels) {
        const int x = p % k.width;
        const int y = p / k.width;
        rays.push_back(ray_for_pixel(k, pose, Vec2(x + 0.5, y + 0.5)));
    }
    return rays;
}

Var render_rays(Tape &tape, const ModelConfig &cfg, const GridVar &grid, std::span<const Ray> rays,
                const RenderConfig &rc, Rng *rng) {
    RayBatchLayout layout;
    layout.offsets.reserve(rays.size() + 1);
    std::vector<Vec3> points;
    std::vector<Vec3> dirs;
    for (const Ray &ray : rays) {
        for (const RaySample &s : sample_ray(ray, *grid.index, rc.near, rc.far, rc.sampling, rng)) {
            points.push_back(s.position);
            dirs.push_back(ray.direction);
            layout.t.push_back(s.t);
            layout.delta.push_back(s.delta);
        }
        layout.offsets.push_back(static_cast<int>(points.size()));
    }
    if (points.empty()) {
        Tensor out(static_cast<int>(rays.size()), 5);
        for (int r = 0; r < out.rows; ++r) {
            for (int c = 0; c < 3; ++c) {
                out(r, c) = rc.background[static_cast<std::size_t>(c)];
            }
            out(r, 4) = 1.0;
        }
        return tape.constant(std::move(out));
    }
    DecodedBatch dec = decode_radiance(tape, cfg, grid, points, dirs);
    return composite(dec.sigma, dec.rgb, layout, rc.background);
}

RenderedImage render_image(const CameraIntrinsics &k, const CameraPose &pose, const SparseVoxelGrid &grid,
                           const ParameterStore &params, const ModelConfig &cfg, RenderConfig rc, Precision precision) {
    k.validate();
    rc.sampling.jitter = false;
    const int n = k.width * k.height;
    const int chunk = std::max(1, rc.chunk_rays);
    const int chunks = (n + chunk - 1) / chunk;
    RenderedImage out{Image(k.width, k.height), DepthMap(k.width, k.height)};
    parallel_for(chunks, [&](int ci) {
        const int begin = ci * chunk;
        const int end = std::min(n, begin + chunk);
        std::vector<int> pixels;
        for (int p = begin; p < end; ++p) {
            pixels.push_back(p);
        }
        const std::vector<Ray> rays = pixel_rays(k, pose, pixels);
        Tape tape(precision);
        tape.bind(params, {""});
        GridVar g = constant_grid(tape, grid);
        const Tensor res = render_rays(tape, cfg, g, rays, rc).value();
        for (int i = 0; i < end - begin; ++i) {
            const int p = begin + i;
            for (int c = 0; c < 3; ++c) {
                out.image.rgb[static_cast<std::size_t>(p) * 3 + static_cast<std::size_t>(c)] = res(i, c);
            }
            if (1.0 - res(i, 4) > kDepthEpsilon) {
                out.depth.depth[static_cast<std::size_t>(p)] = res(i, 3);
            }
        }
    });
    return out;
}

} // namespace voxfuse
