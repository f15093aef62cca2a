// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/local_reconstruction.hpp"

#include "voxfuse/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace voxfuse {

FeatureMap2D image_input(Tape &tape, const Image &img) {
    Tensor t(img.height * img.width, 3);
    std::copy(img.rgb.begin(), img.rgb.end(), t.data.begin());
    return {tape.constant(std::move(t)), img.height, img.width};
}

FeatureMap extract_features(Tape &tape, const ModelConfig &cfg, const Image &img) {
    FeatureMap2D x = image_input(tape, img);
    const int layers = static_cast<int>(cfg.encoder_channels.size());
    for (int i = 0; i < layers; ++i) {
        const std::string base = "encoder." + std::to_string(i);
        x = conv2d(x, tape.param(base + ".weight"), tape.param(base + ".bias"), cfg.encoder_kernel,
                   cfg.encoder_strides[static_cast<std::size_t>(i)]);
        if (i + 1 < layers) {
            x.features = ops::relu(x.features);
        }
    }
    return {x, cfg.downsample_factor()};
}

Var encode_direction(Tape &tape, const ModelConfig &cfg, std::span<const Vec3> directions) {
    Tensor d(static_cast<int>(directions.size()), 3);
    for (std::size_t i = 0; i < directions.size(); ++i) {
        if (std::abs(directions[i].norm() - 1.0) > 1e-6) {
            throw std::invalid_argument("encode_direction: direction is not unit length");
        }
        for (int c = 0; c < 3; ++c) {
            d(static_cast<int>(i), c) = directions[i](c);
        }
    }
    return mlp_forward(tape, "G", cfg.direction_layers, tape.constant(std::move(d)), Activation::relu,
                       Activation::none);
}

Var bilinear_lookup(const FeatureMap &fm, std::span<const Vec2> pixels) {
    const Tensor &src = fm.map.features.value();
    const int h = fm.map.height;
    const int w = fm.map.width;
    const int ch = src.cols;
    const int n = static_cast<int>(pixels.size());
    auto rows = std::make_shared<std::vector<std::array<int, 4>>>(pixels.size());
    auto weights = std::make_shared<std::vector<std::array<double, 4>>>(pixels.size());
    Tensor out(n, ch);
    for (int i = 0; i < n; ++i) {
        const double fx = std::clamp(pixels[static_cast<std::size_t>(i)].x() / fm.factor - 0.5, 0.0, w - 1.0);
        const double fy = std::clamp(pixels[static_cast<std::size_t>(i)].y() / fm.factor - 0.5, 0.0, h - 1.0);
        const int x0 = std::min(static_cast<int>(fx), w - 1);
        const int y0 = std::min(static_cast<int>(fy), h - 1);
        const int x1 = std::min(x0 + 1, w - 1);
        const int y1 = std::min(y0 + 1, h - 1);
        const double ax = fx - x0;
        const double ay = fy - y0;
        auto &r = (*rows)[static_cast<std::size_t>(i)];
        auto &wt = (*weights)[static_cast<std::size_t>(i)];
        r = {y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1};
        wt = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
        auto o = out.row(i);
        for (int k = 0; k < 4; ++k) {
            auto s = src.row(r[static_cast<std::size_t>(k)]);
            for (int c = 0; c < ch; ++c) {
                o[c] += wt[static_cast<std::size_t>(k)] * s[c];
            }
        }
    }
    Var in = fm.map.features;
    return in.tape->record(std::move(out), {in}, [=](Tape &tape, const Tensor &g) {
        Tensor &gi = tape.grad_buffer(in);
        for (int i = 0; i < g.rows; ++i) {
            auto gr = g.row(i);
            for (int k = 0; k < 4; ++k) {
                auto d = gi.row((*rows)[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]);
                const double wk = (*weights)[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
                for (int c = 0; c < g.cols; ++c) {
                    d[c] += wk * gr[c];
                }
            }
        }
    });
}

PerViewFeatureVolume build_per_view_volume(Tape &tape, const ModelConfig &cfg, const CameraView &view,
                                           const FeatureMap &fm, const IndexPtr &active, double max_depth) {
    PerViewFeatureVolume vol;
    vol.active = active;
    std::vector<Vec2> pixels;
    std::vector<Vec3> dirs;
    const Lattice &lat = active->lattice();
    const auto &coords = active->coords();
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const Vec3 c = lat.voxel_center(coords[i]);
        const Projection p = project(c, view);
        if (!p.visible() || p.depth > max_depth) {
            continue;
        }
        vol.rows.push_back(static_cast<int>(i));
        pixels.push_back(p.pixel);
        dirs.push_back((c - view.pose.center()).normalized());
    }
    if (vol.rows.empty()) {
        vol.features = tape.constant(Tensor(0, cfg.view_feature_width()));
        return vol;
    }
    vol.features = ops::concat_cols({bilinear_lookup(fm, pixels), encode_direction(tape, cfg, dirs)});
    return vol;
}

GridVar aggregate_mean_var(const IndexPtr &active, std::span<const PerViewFeatureVolume> volumes) {
    if (volumes.empty()) {
        throw std::invalid_argument("aggregate_mean_var: no views");
    }
    const int width = volumes.front().features.cols();
    std::vector<int> count(active->size(), 0);
    for (const PerViewFeatureVolume &v : volumes) {
        if (v.active != active && !(v.active->coords() == active->coords())) {
            throw std::invalid_argument("aggregate_mean_var: views use different active sets");
        }
        if (v.features.cols() != width || v.features.rows() != static_cast<int>(v.rows.size())) {
            throw std::invalid_argument("aggregate_mean_var: inconsistent per-view feature shapes");
        }
        for (int r : v.rows) {
            ++count[static_cast<std::size_t>(r)];
        }
    }

    // Output rows: covered voxels in canonical order.
    auto out_row = std::make_shared<std::vector<int>>(active->size(), -1);
    std::vector<VoxelCoord> covered;
    for (std::size_t i = 0; i < active->size(); ++i) {
        if (count[i] > 0) {
            (*out_row)[i] = static_cast<int>(covered.size());
            covered.push_back(active->coords()[i]);
        }
    }
    IndexPtr index = covered.size() == active->size() ? active : make_index(active->lattice(), covered);
    const int m = static_cast<int>(covered.size());

    Tensor mean(m, width);
    Tensor sq(m, width);
    for (const PerViewFeatureVolume &v : volumes) {
        const Tensor &f = v.features.value();
        for (std::size_t i = 0; i < v.rows.size(); ++i) {
            const int o = (*out_row)[static_cast<std::size_t>(v.rows[i])];
            auto src = f.row(static_cast<int>(i));
            auto mr = mean.row(o);
            for (int c = 0; c < width; ++c) {
                mr[c] += src[c];
            }
        }
    }
    auto inv_n = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
    for (std::size_t i = 0; i < active->size(); ++i) {
        const int o = (*out_row)[i];
        if (o >= 0) {
            (*inv_n)[static_cast<std::size_t>(o)] = 1.0 / count[i];
        }
    }
    for (int o = 0; o < m; ++o) {
        for (double &x : mean.row(o)) {
            x *= (*inv_n)[static_cast<std::size_t>(o)];
        }
    }
    for (const PerViewFeatureVolume &v : volumes) {
        const Tensor &f = v.features.value();
        for (std::size_t i = 0; i < v.rows.size(); ++i) {
            const int o = (*out_row)[static_cast<std::size_t>(v.rows[i])];
            auto src = f.row(static_cast<int>(i));
            auto mr = mean.row(o);
            auto sr = sq.row(o);
            for (int c = 0; c < width; ++c) {
                const double d = src[c] - mr[c];
                sr[c] += d * d;
            }
        }
    }
    Tensor out(m, 2 * width);
    for (int o = 0; o < m; ++o) {
        auto dst = out.row(o);
        const double inv = (*inv_n)[static_cast<std::size_t>(o)];
        for (int c = 0; c < width; ++c) {
            dst[c] = mean(o, c);
            dst[width + c] = sq(o, c) * inv;
        }
    }

    std::vector<Var> inputs;
    auto row_maps = std::make_shared<std::vector<std::vector<int>>>();
    for (const PerViewFeatureVolume &v : volumes) {
        inputs.push_back(v.features);
        row_maps->push_back(v.rows);
    }
    auto mean_ptr = std::make_shared<Tensor>(std::move(mean));
    Tape &tape = *volumes.front().features.tape;
    Var result = tape.record(std::move(out), inputs, [=](Tape &tape, const Tensor &g) {
        // d mean / dx = 1/n; d var / dx = 2 (x - mean) / n
        for (std::size_t vi = 0; vi < inputs.size(); ++vi) {
            if (!tape.requires_grad(inputs[vi])) {
                continue;
            }
            const Tensor &f = tape.value(inputs[vi]);
            Tensor &gf = tape.grad_buffer(inputs[vi]);
            const std::vector<int> &rows = (*row_maps)[vi];
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const int o = (*out_row)[static_cast<std::size_t>(rows[i])];
                const double inv = (*inv_n)[static_cast<std::size_t>(o)];
                auto src = f.row(static_cast<int>(i));
                auto gr = g.row(o);
                auto mr = mean_ptr->row(o);
                auto d = gf.row(static_cast<int>(i));
                for (int c = 0; c < width; ++c) {
                    d[c] += inv * (gr[c] + 2.0 * (src[c] - mr[c]) * gr[width + c]);
                }
            }
        }
    });
    return {index, result};
}

GridVar reconstruct_local_volume(Tape &tape, const ModelConfig &cfg, const GridVar &aggregated) {
    if (aggregated.features.cols() != cfg.aggregate_width()) {
        throw std::invalid_argument("reconstruct_local_volume: expected " + std::to_string(cfg.aggregate_width()) +
                                    " input channels, got " + std::to_string(aggregated.features.cols()));
    }
    return sparse_conv_stack(tape, "J", cfg.local_layers, aggregated, Activation::relu, Activation::none);
}

GridVar build_local_volume(Tape &tape, const ModelConfig &cfg, std::span<const CameraView> views,
                           const Lattice &lattice, const FrustumConfig &frustum) {
    IndexPtr active = make_index(lattice, frustum_voxels(views, lattice, frustum));
    if (active->empty()) {
        return empty_grid(tape, lattice, cfg.channels);
    }
    std::vector<PerViewFeatureVolume> volumes;
    for (const CameraView &v : views) {
        const FeatureMap fm = extract_features(tape, cfg, v.image);
        volumes.push_back(build_per_view_volume(tape, cfg, v, fm, active, frustum.max_depth));
    }
    return reconstruct_local_volume(tape, cfg, aggregate_mean_var(active, volumes));
}

} // namespace voxfuse
