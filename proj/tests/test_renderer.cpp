// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/ops.hpp"
#include "voxfuse/renderer.hpp"

#include "support/check.hpp"
#include "support/oracles.hpp"

#include <gtest/gtest.h>

using namespace voxfuse;
using namespace voxfuse::testing;

namespace {

void zero_prefix(ParameterStore &p, const std::string &prefix) {
    for (const auto &[name, t] : p.all()) {
        if (name.rfind(prefix, 0) == 0) {
            p.set(name, Tensor(t.rows, t.cols));
        }
    }
}

/// Decoder that emits a constant density and color everywhere.
ParameterStore constant_decoder(const ModelConfig &cfg, double density_bias, const Rgb &logits) {
    ParameterStore p = init_model(cfg, 1);
    zero_prefix(p, "R.");
    p.set("R.density.0.bias", Tensor(1, 1, density_bias));
    const std::string last = "R.color." + std::to_string(cfg.decoder_color_layers - 1) + ".bias";
    p.set(last, Tensor::from(1, 3, {logits[0], logits[1], logits[2]}));
    return p;
}

Vec3 random_unit(Rng &rng) {
    std::normal_distribution<double> n;
    return Vec3(n(rng), n(rng), n(rng)).normalized();
}

} // namespace

TEST(DecodeRadiance, ZeroWeights) {
    const ModelConfig cfg = tiny_model();
    ParameterStore p = init_model(cfg, 2);
    zero_prefix(p, "R.");
    Rng rng(1);
    const SparseVoxelGrid g = random_grid(Lattice{}, dense_coords(3), cfg.channels, rng);
    const RadianceOutput out = decode_radiance(g, p, cfg, Vec3(1.2, 1.4, 0.9), random_unit(rng));
    EXPECT_NEAR(out.sigma, std::log(2.0), 1e-12);
    for (double c : out.rgb) {
        EXPECT_NEAR(c, 0.5, 1e-12);
    }
}

TEST(DecodeRadiance, DensityIgnoresDirection) {
    const ModelConfig cfg = tiny_model();
    const ParameterStore p = init_model(cfg, 3);
    Rng rng(2);
    const SparseVoxelGrid g = random_grid(Lattice{}, dense_coords(3), cfg.channels, rng);
    const Vec3 x(1.3, 1.1, 1.7);
    const RadianceOutput a = decode_radiance(g, p, cfg, x, Vec3::UnitX());
    const RadianceOutput b = decode_radiance(g, p, cfg, x, -Vec3::UnitY());
    EXPECT_EQ(a.sigma, b.sigma);
    EXPECT_NE(a.rgb, b.rgb);
}

TEST(DecodeRadiance, NonUnitDirectionRejected) {
    const ModelConfig cfg = tiny_model();
    const ParameterStore p = init_model(cfg, 3);
    const SparseVoxelGrid g(GridSpec{Lattice{}, cfg.channels});
    EXPECT_THROW(decode_radiance(g, p, cfg, Vec3::Zero(), Vec3(1, 1, 0)), std::invalid_argument);
}

TEST(DecodeRadiance, SigmaGradientWrtFeatures) {
    const ModelConfig cfg = tiny_model();
    const ParameterStore p = init_model(cfg, 4);
    Rng rng(3);
    SparseVoxelGrid g = random_grid(Lattice{}, dense_coords(3), cfg.channels, rng);
    const std::vector<Vec3> pts = {Vec3(1.2, 1.4, 0.9), Vec3(0.7, 2.1, 1.5)};
    const std::vector<Vec3> dirs = {random_unit(rng), random_unit(rng)};
    auto sigma_sum = [&](Tape &t, const GridVar &gv) { return ops::sum(decode_radiance(t, cfg, gv, pts, dirs).sigma); };
    Tape t;
    t.bind(p);
    GridVar gv = variable_grid(t, g);
    t.backward(sigma_sum(t, gv));
    const Tensor numeric = numeric_gradient(
        [&] {
            Tape f;
            f.bind(p);
            return sigma_sum(f, constant_grid(f, g)).value().data[0];
        },
        g.features);
    EXPECT_LT(relative_error(*t.grad(gv.features), numeric), 1e-5);
}

TEST(SampleRay, MissReturnsNothing) {
    const IndexPtr idx = make_index(Lattice{}, {{0, 0, 0}});
    const Ray r{Vec3(5, 5, -1), Vec3::UnitZ()};
    EXPECT_TRUE(sample_ray(r, *idx, 0.0, 10.0, {}).empty());
}

TEST(SampleRay, AxisAlignedUnitVoxel) {
    const IndexPtr idx = make_index(Lattice{}, {{0, 0, 0}});
    const Ray r{Vec3(0.5, 0.5, -2), Vec3::UnitZ()};
    const std::vector<RaySample> s = sample_ray(r, *idx, 0.0, 10.0, {4, false});
    ASSERT_EQ(s.size(), 4u);
    for (int i = 0; i < 4; ++i) {
        EXPECT_NEAR(s[static_cast<std::size_t>(i)].delta, 0.25, 1e-12);
        EXPECT_NEAR(s[static_cast<std::size_t>(i)].t, 2.0 + 0.25 * (i + 0.5), 1e-12);
        EXPECT_EQ(idx->lattice().world_to_voxel(s[static_cast<std::size_t>(i)].position), (VoxelCoord{0, 0, 0}));
    }
}

TEST(SampleRay, JitterStaysInStrata) {
    const IndexPtr idx = make_index(Lattice{}, {{0, 0, 0}, {0, 0, 1}});
    const Ray r{Vec3(0.5, 0.5, -2), Vec3::UnitZ()};
    Rng rng(4);
    const std::vector<RaySample> s = sample_ray(r, *idx, 0.0, 10.0, {4, true}, &rng);
    ASSERT_EQ(s.size(), 8u);
    for (std::size_t i = 0; i < s.size(); ++i) {
        EXPECT_GE(s[i].t, 2.0 + 0.25 * static_cast<double>(i));
        EXPECT_LE(s[i].t, 2.0 + 0.25 * static_cast<double>(i + 1));
    }
    EXPECT_THROW(sample_ray(r, *idx, 0.0, 10.0, {4, true}, nullptr), std::invalid_argument);
    EXPECT_THROW(sample_ray(r, *idx, 2.0, 1.0, {}), std::invalid_argument);
}

TEST(TraverseActive, MatchesExhaustiveIntersection) {
    Rng rng(5);
    const Lattice lat{Vec3(-0.1, 0.2, 0.0), 0.2};
    const IndexPtr idx = make_index(lat, random_coords(50, 5, rng));
    std::uniform_real_distribution<double> u(-0.5, 1.5);
    int nonempty = 0;
    for (int trial = 0; trial < 300; ++trial) {
        const Ray r{Vec3(u(rng), u(rng), u(rng)), random_unit(rng)};
        const double near = 0.05;
        const double far = 1.5;
        const std::vector<VoxelHit> got = traverse_active(r, *idx, near, far);
        const std::vector<oracle::BoxHit> want = oracle::ray_voxel_hits(r, *idx, near, far);
        ASSERT_EQ(got.size(), want.size()) << "trial " << trial;
        for (std::size_t i = 0; i < got.size(); ++i) {
            EXPECT_EQ(got[i].coord, want[i].coord);
            EXPECT_NEAR(got[i].t_enter, want[i].t_enter, 1e-9);
            EXPECT_NEAR(got[i].t_exit, want[i].t_exit, 1e-9);
        }
        nonempty += got.empty() ? 0 : 1;
    }
    EXPECT_GT(nonempty, 50);
}

namespace {

struct RandomSamples {
    std::vector<RaySample> samples;
    std::vector<double> t;
    std::vector<double> delta;
    std::vector<double> sigma;
    std::vector<Rgb> rgb;
};

RandomSamples random_samples(int n, Rng &rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    RandomSamples r;
    double t = 0.1;
    for (int i = 0; i < n; ++i) {
        const double d = 0.01 + 0.2 * u(rng);
        t += d;
        r.samples.push_back({Vec3::Zero(), t, d});
        r.t.push_back(t);
        r.delta.push_back(d);
        r.sigma.push_back(5.0 * u(rng));
        r.rgb.push_back({u(rng), u(rng), u(rng)});
    }
    return r;
}

} // namespace

TEST(Composite, ZeroDensityShowsBackground) {
    Rng rng(6);
    RandomSamples s = random_samples(5, rng);
    std::fill(s.sigma.begin(), s.sigma.end(), 0.0);
    const CompositeResult c = composite(s.samples, s.sigma, s.rgb, {0.2, 0.4, 0.6});
    EXPECT_EQ(c.transmittance, 1.0);
    EXPECT_NEAR(c.rgb[0], 0.2, 1e-15);
    EXPECT_NEAR(c.rgb[2], 0.6, 1e-15);
}

TEST(Composite, HalfOpacitySample) {
    const std::vector<RaySample> s = {{Vec3::Zero(), 1.0, 0.5}};
    const std::vector<double> sigma = {2.0 * std::log(2.0)};
    const std::vector<Rgb> rgb = {{1.0, 0.0, 0.5}};
    const CompositeResult c = composite(s, sigma, rgb, {0.0, 1.0, 0.5});
    EXPECT_NEAR(c.rgb[0], 0.5, 1e-12);
    EXPECT_NEAR(c.rgb[1], 0.5, 1e-12);
    EXPECT_NEAR(c.rgb[2], 0.5, 1e-12);
    EXPECT_NEAR(c.transmittance, 0.5, 1e-12);
}

TEST(Composite, MatchesSequentialAccumulation) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const RandomSamples s = random_samples(10, rng);
        const Rgb bg = {0.3, 0.1, 0.9};
        const CompositeResult c = composite(s.samples, s.sigma, s.rgb, bg);
        const oracle::CompositeOut o = oracle::composite(s.t, s.delta, s.sigma, s.rgb, bg);
        for (int k = 0; k < 3; ++k) {
            EXPECT_NEAR(c.rgb[static_cast<std::size_t>(k)], o.rgb[static_cast<std::size_t>(k)], 1e-12);
        }
        EXPECT_NEAR(c.depth, o.depth, 1e-12);
        EXPECT_NEAR(c.transmittance, o.transmittance, 1e-12);
    }
}

TEST(Composite, UnorderedSamplesRejected) {
    const std::vector<RaySample> s = {{Vec3::Zero(), 1.0, 0.1}, {Vec3::Zero(), 0.5, 0.1}};
    const std::vector<double> sigma = {1, 1};
    const std::vector<Rgb> rgb(2);
    EXPECT_THROW(composite(s, sigma, rgb, {}), std::invalid_argument);
}

TEST(Composite, WeightsAndTransmittanceSumToOne) {
    Rng rng(8);
    for (int trial = 0; trial < 1000; ++trial) {
        const RandomSamples s = random_samples(1 + trial % 40, rng);
        const CompositeResult c = composite(s.samples, s.sigma, s.rgb, {1, 1, 1});
        EXPECT_NEAR(c.opacity + c.transmittance, 1.0, 1e-12);
        for (double v : c.rgb) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0 + 1e-12);
        }
    }
}

TEST(Composite, TransmittanceMonotoneInDensity) {
    Rng rng(9);
    RandomSamples s = random_samples(8, rng);
    double prev = composite(s.samples, s.sigma, s.rgb, {}).transmittance;
    for (int i = 0; i < 8; ++i) {
        s.sigma[static_cast<std::size_t>(i)] += 0.7;
        const double cur = composite(s.samples, s.sigma, s.rgb, {}).transmittance;
        EXPECT_LE(cur, prev);
        prev = cur;
    }
}

TEST(Composite, SplittingUniformIntervalIsExact) {
    // Splitting an interval of constant density and color is exact.
    const Rgb c0 = {0.9, 0.2, 0.4};
    const Rgb c1 = {0.1, 0.8, 0.3};
    std::vector<double> errs;
    for (double d : {0.2, 0.1, 0.05}) {
        const std::vector<RaySample> coarse = {{Vec3::Zero(), 1.0, d}, {Vec3::Zero(), 1.0 + d, d}};
        const std::vector<RaySample> fine = {
            {Vec3::Zero(), 1.0 - d / 4, d / 2}, {Vec3::Zero(), 1.0 + d / 4, d / 2}, {Vec3::Zero(), 1.0 + d, d}};
        const std::vector<double> sc = {3.0, 1.0};
        const std::vector<double> sf = {3.0, 3.0, 1.0};
        const std::vector<Rgb> rc = {c0, c1};
        const std::vector<Rgb> rf = {c0, c0, c1};
        const CompositeResult a = composite(coarse, sc, rc, {});
        const CompositeResult b = composite(fine, sf, rf, {});
        errs.push_back(std::abs(a.rgb[0] - b.rgb[0]) + std::abs(a.rgb[1] - b.rgb[1]) + std::abs(a.rgb[2] - b.rgb[2]));
    }
    EXPECT_LT(errs[0], 1e-12);
    EXPECT_LT(errs[2], 1e-12);
}

TEST(Composite, TapedGradients) {
    Rng rng(10);
    RayBatchLayout layout;
    std::vector<double> sigma;
    Tensor rgb(0, 3);
    std::vector<double> rgbv;
    // third ray has nearly no density so the depth uses the epsilon floor
    for (int r = 0; r < 3; ++r) {
        const RandomSamples s = random_samples(4 + r, rng);
        for (std::size_t i = 0; i < s.t.size(); ++i) {
            layout.t.push_back(s.t[i]);
            layout.delta.push_back(s.delta[i]);
            sigma.push_back(r == 2 ? 1e-7 * s.sigma[i] : s.sigma[i]);
            rgbv.insert(rgbv.end(), s.rgb[i].begin(), s.rgb[i].end());
        }
        layout.offsets.push_back(static_cast<int>(layout.t.size()));
    }
    const int n = static_cast<int>(sigma.size());
    Tensor sig = Tensor::from(n, 1, sigma);
    Tensor col = Tensor::from(n, 3, rgbv);
    const Tensor w = random_tensor(3, 5, rng);
    const Rgb bg = {0.2, 0.5, 0.7};
    auto loss = [&](Tape &t, Var s, Var c) { return ops::sum(ops::mul(composite(s, c, layout, bg), t.constant(w))); };
    Tape t;
    Var vs = t.variable(sig);
    Var vc = t.variable(col);
    t.backward(loss(t, vs, vc));
    const Tensor ns = numeric_gradient(
        [&] {
            Tape f;
            return loss(f, f.constant(sig), f.constant(col)).value().data[0];
        },
        sig, 1e-8);
    const Tensor nc = numeric_gradient(
        [&] {
            Tape f;
            return loss(f, f.constant(sig), f.constant(col)).value().data[0];
        },
        col);
    EXPECT_LT(relative_error(*t.grad(vs), ns), 1e-4);
    EXPECT_LT(relative_error(*t.grad(vc), nc), 1e-4);

    // forward matches the scalar path
    const Tensor out = composite(t.constant(sig), t.constant(col), layout, bg).value();
    for (int r = 0; r < 3; ++r) {
        std::vector<RaySample> s;
        std::vector<double> sg;
        std::vector<Rgb> cs;
        for (int i = layout.offsets[static_cast<std::size_t>(r)]; i < layout.offsets[static_cast<std::size_t>(r) + 1];
             ++i) {
            s.push_back({Vec3::Zero(), layout.t[static_cast<std::size_t>(i)], layout.delta[static_cast<std::size_t>(i)]});
            sg.push_back(sig(i, 0));
            cs.push_back({col(i, 0), col(i, 1), col(i, 2)});
        }
        const CompositeResult c = composite(s, sg, cs, bg);
        EXPECT_NEAR(out(r, 0), c.rgb[0], 1e-14);
        EXPECT_NEAR(out(r, 3), c.depth, 1e-12);
        EXPECT_NEAR(out(r, 4), c.transmittance, 1e-14);
    }
}

TEST(RenderImage, EmptyGridIsBackground) {
    const ModelConfig cfg = tiny_model();
    const ParameterStore p = init_model(cfg, 5);
    const SparseVoxelGrid g(GridSpec{Lattice{}, cfg.channels});
    RenderConfig rc;
    rc.background = {0.1, 0.2, 0.3};
    const RenderedImage img = render_image({16, 16, 8, 8, 16, 16}, CameraPose{}, g, p, cfg, rc);
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) {
            EXPECT_EQ(img.image.at(x, y, 1), 0.2);
            EXPECT_TRUE(std::isnan(img.depth.at(x, y)));
        }
    }
}

TEST(RenderImage, OpaqueRedVoxel) {
    const ModelConfig cfg = tiny_model();
    const ParameterStore p = constant_decoder(cfg, 200.0, {20.0, -20.0, -20.0});
    const Lattice lat{Vec3(-0.05, -0.05, 0.95), 0.1};
    const SparseVoxelGrid g = SparseVoxelGrid::from_cells({lat, cfg.channels}, {{{0, 0, 0}, std::vector<double>(4, 0.0)}});
    RenderConfig rc;
    const CameraIntrinsics k{64, 64, 16, 16, 32, 32};
    const RenderedImage img = render_image(k, CameraPose{}, g, p, cfg, rc);
    int covered = 0;
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
            const Ray r = ray_for_pixel(k, CameraPose{}, Vec2(x + 0.5, y + 0.5));
            if (oracle::ray_voxel_hits(r, *g.index, 0.0, 10.0).empty()) {
                EXPECT_EQ(img.image.at(x, y, 0), 0.0);
                continue;
            }
            ++covered;
            EXPECT_NEAR(img.image.at(x, y, 0), 1.0, 1.0 / 255);
            EXPECT_NEAR(img.image.at(x, y, 1), 0.0, 1.0 / 255);
            const double entry = 0.95 / r.direction.z();
            EXPECT_NEAR(img.depth.at(x, y), entry, 0.1);
        }
    }
    EXPECT_GT(covered, 4);
}

TEST(RenderRays, PixelsAreIndependent) {
    const ModelConfig cfg = tiny_model();
    const ParameterStore p = init_model(cfg, 6);
    Rng rng(11);
    const Lattice lat{Vec3(-0.3, -0.3, 0.6), 0.15};
    const SparseVoxelGrid g = random_grid(lat, dense_coords(4), cfg.channels, rng);
    const CameraIntrinsics k{20, 20, 6, 6, 12, 12};
    RenderConfig rc;
    rc.background = {1, 1, 1};
    const RenderedImage img = render_image(k, CameraPose{}, g, p, cfg, rc);
    std::vector<int> pixels(144);
    std::iota(pixels.begin(), pixels.end(), 0);
    std::shuffle(pixels.begin(), pixels.end(), rng);
    const std::vector<Ray> rays = pixel_rays(k, CameraPose{}, pixels);
    Tape t;
    t.bind(p);
    const Tensor batch = render_rays(t, cfg, constant_grid(t, g), rays, rc).value();
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        const int px = pixels[i] % 12;
        const int py = pixels[i] / 12;
        for (int c = 0; c < 3; ++c) {
            EXPECT_NEAR(batch(static_cast<int>(i), c), img.image.at(px, py, c), 1e-14);
        }
        Tape single;
        single.bind(p);
        const Tensor one = render_rays(single, cfg, constant_grid(single, g), std::span(&rays[i], 1), rc).value();
        EXPECT_EQ(one(0, 0), batch(static_cast<int>(i), 0));
    }
}

TEST(RenderRays, LossGradientMatchesDifferences) {
    const ModelConfig cfg = tiny_model();
    ParameterStore p = init_model(cfg, 7);
    // a positive density bias keeps the rays from being fully transparent
    p.set("R.density.0.bias", Tensor(1, 1, 1.5));
    Rng rng(12);
    const Lattice lat{Vec3(-0.2, -0.2, 0.5), 0.1};
    SparseVoxelGrid g = random_grid(lat, dense_coords(4), cfg.channels, rng);
    const CameraIntrinsics k{12, 12, 4, 4, 8, 8};
    std::vector<int> pixels(64);
    std::iota(pixels.begin(), pixels.end(), 0);
    const std::vector<Ray> rays = pixel_rays(k, CameraPose{}, pixels);
    const Tensor target = random_tensor(64, 3, rng, 0.0, 1.0);
    RenderConfig rc;
    rc.sampling.per_voxel = 2;
    auto loss = [&](Tape &t, const GridVar &gv) {
        return ops::mse(ops::slice_cols(render_rays(t, cfg, gv, rays, rc), 0, 3), target);
    };

    Tape t;
    t.bind(p);
    GridVar gv = variable_grid(t, g);
    t.backward(loss(t, gv));
    const Gradients grads = t.parameter_gradients();
    const Tensor gfeat = *t.grad(gv.features);

    const Tensor nfeat = numeric_gradient(
        [&] {
            Tape f;
            f.bind(p);
            return loss(f, constant_grid(f, g)).value().data[0];
        },
        g.features);
    EXPECT_LT(relative_error(gfeat, nfeat), 1e-3);

    for (const auto &[name, value] : p.all()) {
        if (name.rfind("R.", 0) != 0) {
            continue;
        }
        Tensor v = value;
        const Tensor numeric = numeric_gradient(
            [&] {
                ParameterStore q = p;
                q.set(name, v);
                Tape f;
                f.bind(q);
                return loss(f, constant_grid(f, g)).value().data[0];
            },
            v);
        EXPECT_LT(relative_error(grads.at(name), numeric), 1e-3) << name;
    }
}
