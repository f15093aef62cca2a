// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/layers.hpp"
#include "voxfuse/ops.hpp"
#include "voxfuse/parameters.hpp"

#include "support/check.hpp"
#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace voxfuse;
using namespace voxfuse::testing;

namespace {

/// Checks d(sum(w * f(x)))/dx against central differences.
void expect_op_gradient(const std::function<Var(Tape &, Var)> &op, Tensor x, double tol = 1e-4) {
    Rng rng(11);
    Tape probe;
    const Tensor w = random_tensor(op(probe, probe.constant(x)).rows(), op(probe, probe.constant(x)).cols(), rng);
    auto scalar = [&](Tape &tape, Var in) { return ops::sum(ops::mul(op(tape, in), tape.constant(w))); };
    Tape tape;
    Var in = tape.variable(x);
    tape.backward(scalar(tape, in));
    const Tensor analytic = *tape.grad(in);
    const Tensor numeric = numeric_gradient(
        [&] {
            Tape t;
            return scalar(t, t.constant(x)).value().data[0];
        },
        x);
    EXPECT_LT(relative_error(analytic, numeric), tol);
}

/// Random values kept away from zero so relu kinks stay out of the stencil.
Tensor away_from_zero(int r, int c, Rng &rng) {
    Tensor t = random_tensor(r, c, rng, 0.1, 1.0);
    std::bernoulli_distribution flip(0.5);
    for (double &v : t.data) {
        if (flip(rng)) {
            v = -v;
        }
    }
    return t;
}

} // namespace

TEST(Ops, ElementwiseGradients) {
    Rng rng(1);
    const Tensor x = away_from_zero(3, 4, rng);
    const Tensor y = random_tensor(3, 4, rng);
    expect_op_gradient([&](Tape &t, Var a) { return ops::add(a, t.constant(y)); }, x);
    expect_op_gradient([&](Tape &t, Var a) { return ops::sub(t.constant(y), a); }, x);
    expect_op_gradient([&](Tape &t, Var a) { return ops::mul(a, t.constant(y)); }, x);
    expect_op_gradient([&](Tape &, Var a) { return ops::mul(a, a); }, x);
    expect_op_gradient([](Tape &, Var a) { return ops::affine(a, -2.5, 0.3); }, x);
    expect_op_gradient([](Tape &, Var a) { return ops::relu(a); }, x);
    expect_op_gradient([](Tape &, Var a) { return ops::sigmoid(a); }, x);
    expect_op_gradient([](Tape &, Var a) { return ops::tanh(a); }, x);
    expect_op_gradient([](Tape &, Var a) { return ops::softplus(a); }, x);
}

TEST(Ops, StructuralGradients) {
    Rng rng(2);
    const Tensor x = random_tensor(4, 3, rng);
    const Tensor w = random_tensor(3, 5, rng);
    const Tensor b = random_tensor(1, 5, rng);
    expect_op_gradient([&](Tape &t, Var a) { return ops::matmul(a, t.constant(w)); }, x);
    const Tensor left = random_tensor(2, 4, rng);
    expect_op_gradient([&](Tape &t, Var a) { return ops::matmul(t.constant(left), a); }, x);
    expect_op_gradient([&](Tape &t, Var a) { return ops::linear(t.constant(x), a, t.constant(b)); }, w);
    expect_op_gradient([&](Tape &t, Var a) { return ops::linear(t.constant(x), t.constant(w), a); }, b);
    expect_op_gradient([&](Tape &t, Var a) { return ops::concat_cols({a, t.constant(x), a}); }, x);
    expect_op_gradient([](Tape &, Var a) { return ops::slice_cols(a, 1, 2); }, x);
    expect_op_gradient([](Tape &, Var a) { return ops::gather_rows(a, {3, -1, 0, 3}); }, x);
    expect_op_gradient(
        [](Tape &, Var a) {
            return ops::assemble_rows(5, 3, {{a, {0, 2}, {4, 1}}, {ops::affine(a, 2, 0), {1}, {0}}});
        },
        x);
    expect_op_gradient([](Tape &, Var a) { return ops::mse(a, Tensor(4, 3, 0.25)); }, x);
    expect_op_gradient([](Tape &, Var a) { return ops::positional_encoding(a, 3); }, x, 1e-6);
}

TEST(Ops, ShapeMismatchRejected) {
    Tape t;
    Var a = t.constant(Tensor(2, 3));
    Var b = t.constant(Tensor(3, 2));
    EXPECT_THROW(ops::add(a, b), std::invalid_argument);
    EXPECT_THROW(ops::matmul(a, a), std::invalid_argument);
    EXPECT_THROW(ops::slice_cols(a, 2, 2), std::invalid_argument);
}

TEST(Ops, AssembleRejectsDoubleWrite) {
    Tape t;
    Var a = t.constant(Tensor(2, 1, 1.0));
    EXPECT_THROW(ops::assemble_rows(3, 1, {{a, {0, 1}, {2, 2}}}), std::invalid_argument);
}

TEST(PositionalEncoding, LayoutAndWidth) {
    Tape t;
    Var x = t.constant(Tensor::from(1, 2, {0.25, -0.5}));
    const Tensor out = ops::positional_encoding(x, 2).value();
    ASSERT_EQ(out.cols, 10);
    const double pi = std::numbers::pi;
    const std::vector<double> expected = {0.25,
                                          -0.5,
                                          std::sin(pi * 0.25),
                                          std::sin(-pi * 0.5),
                                          std::cos(pi * 0.25),
                                          std::cos(-pi * 0.5),
                                          std::sin(2 * pi * 0.25),
                                          std::sin(-2 * pi * 0.5),
                                          std::cos(2 * pi * 0.25),
                                          std::cos(-2 * pi * 0.5)};
    for (int i = 0; i < 10; ++i) {
        EXPECT_NEAR(out(0, i), expected[static_cast<std::size_t>(i)], 1e-15);
    }
    EXPECT_EQ(ops::positional_encoding(t.constant(Tensor(3, 16)), 5).cols(), 176);
}

TEST(Gemm, SinglePrecisionCloseToDouble) {
    Rng rng(3);
    const Tensor a = random_tensor(7, 9, rng);
    const Tensor b = random_tensor(9, 5, rng);
    Tensor c64(7, 5);
    Tensor c32(7, 5);
    ops::detail::gemm(a, false, b, false, c64, false, Precision::f64);
    ops::detail::gemm(a, false, b, false, c32, false, Precision::f32);
    EXPECT_LT(max_abs_diff(c64, c32), 1e-5);
    EXPECT_GT(max_abs_diff(c64, c32), 0.0);
}

TEST(Tape, BackwardOnlyOnce) {
    Tape t;
    Var x = t.variable(Tensor(1, 1, 2.0));
    Var l = ops::sum(ops::mul(x, x));
    t.backward(l);
    EXPECT_DOUBLE_EQ((*t.grad(x))(0, 0), 4.0);
    EXPECT_THROW(t.backward(l), std::logic_error);
}

TEST(Tape, NodesPrecedeTheirUsers) {
    Tape t;
    Var a = t.variable(Tensor(1, 1, 1.0));
    Var b = ops::affine(a, 2, 0);
    Var c = ops::add(a, b);
    EXPECT_LT(a.id, b.id);
    EXPECT_LT(b.id, c.id);
    EXPECT_EQ(t.size(), 3u);
}

TEST(Tape, FrozenParametersGetNoGradient) {
    ParameterStore store;
    store.add("R.w", Tensor(1, 1, 3.0));
    store.add("J.w", Tensor(1, 1, 5.0));
    Tape t;
    t.bind(store, {"J."});
    Var l = ops::sum(ops::mul(t.param("R.w"), t.param("J.w")));
    t.backward(l);
    const Gradients g = t.parameter_gradients();
    EXPECT_EQ(g.count("J.w"), 0u);
    EXPECT_DOUBLE_EQ(g.at("R.w")(0, 0), 5.0);
}

TEST(Mlp, MatchesHandRolledForwardAndDifferences) {
    Rng rng(4);
    ParameterStore store;
    add_mlp_params(store, "net", {3, 4, 4}, rng);
    store.set("net.0.bias", random_tensor(1, 4, rng, -0.3, 0.3));
    store.set("net.1.bias", random_tensor(1, 4, rng, -0.3, 0.3));
    const Tensor x = random_tensor(5, 3, rng);

    auto hand = [&](const ParameterStore &p) {
        const Tensor &w0 = p.get("net.0.weight");
        const Tensor &b0 = p.get("net.0.bias");
        const Tensor &w1 = p.get("net.1.weight");
        const Tensor &b1 = p.get("net.1.bias");
        Tensor out(5, 4);
        for (int n = 0; n < 5; ++n) {
            double h[4];
            for (int j = 0; j < 4; ++j) {
                double s = b0(0, j);
                for (int i = 0; i < 3; ++i) {
                    s += x(n, i) * w0(i, j);
                }
                h[j] = std::max(0.0, s);
            }
            for (int j = 0; j < 4; ++j) {
                double s = b1(0, j);
                for (int i = 0; i < 4; ++i) {
                    s += h[i] * w1(i, j);
                }
                out(n, j) = std::tanh(s);
            }
        }
        return out;
    };
    auto loss_of = [](const Tensor &out) {
        double s = 0.0;
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            s += out.data[i] * static_cast<double>(i % 3 + 1);
        }
        return s;
    };

    Tape t;
    t.bind(store);
    Var out = mlp_forward(t, "net", 2, t.constant(x), Activation::relu, Activation::tanh);
    EXPECT_LT(max_abs_diff(out.value(), hand(store)), 1e-12);
    Tensor weights(5, 4);
    for (std::size_t i = 0; i < weights.data.size(); ++i) {
        weights.data[i] = static_cast<double>(i % 3 + 1);
    }
    t.backward(ops::sum(ops::mul(out, t.constant(weights))));
    const Gradients g = t.parameter_gradients();
    for (const auto &[name, value] : store.all()) {
        Tensor v = value;
        const Tensor numeric = numeric_gradient(
            [&] {
                ParameterStore p = store;
                p.set(name, v);
                return loss_of(hand(p));
            },
            v);
        EXPECT_LT(relative_error(g.at(name), numeric), 1e-5) << name;
    }
}

TEST(Mlp, InputWidthChecked) {
    Rng rng(5);
    ParameterStore store;
    add_mlp_params(store, "net", {3, 2}, rng);
    Tape t;
    t.bind(store);
    EXPECT_THROW(mlp_forward(t, "net", 1, t.constant(Tensor(2, 4)), Activation::relu, Activation::none),
                 std::invalid_argument);
}

TEST(Conv2d, MatchesNaiveLoop) {
    Rng rng(6);
    const int h = 5;
    const int w = 5;
    const int cin = 2;
    const int cout = 3;
    const int k = 3;
    const Tensor in = random_tensor(h * w, cin, rng);
    const Tensor weight = random_tensor(k * k * cin, cout, rng);
    const Tensor bias = random_tensor(1, cout, rng);
    for (int stride : {1, 2}) {
        Tape t;
        const FeatureMap2D out =
            conv2d({t.constant(in), h, w}, t.constant(weight), t.constant(bias), k, stride);
        const int oh = (h + stride - 1) / stride;
        const int ow = (w + stride - 1) / stride;
        ASSERT_EQ(out.height, oh);
        ASSERT_EQ(out.width, ow);
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                for (int co = 0; co < cout; ++co) {
                    double s = bias(0, co);
                    for (int ky = 0; ky < k; ++ky) {
                        for (int kx = 0; kx < k; ++kx) {
                            const int iy = oy * stride + ky - 1;
                            const int ix = ox * stride + kx - 1;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                                continue;
                            }
                            for (int ci = 0; ci < cin; ++ci) {
                                s += in(iy * w + ix, ci) * weight((ky * k + kx) * cin + ci, co);
                            }
                        }
                    }
                    EXPECT_NEAR(out.features.value()(oy * ow + ox, co), s, 1e-9);
                }
            }
        }
    }
}

TEST(Conv2d, Gradients) {
    Rng rng(7);
    const Tensor in = random_tensor(6 * 5, 2, rng);
    const Tensor weight = random_tensor(9 * 2, 3, rng);
    const Tensor bias = random_tensor(1, 3, rng);
    expect_op_gradient([&](Tape &t, Var a) { return conv2d({a, 6, 5}, t.constant(weight), t.constant(bias), 3, 2).features; },
                       in);
    expect_op_gradient([&](Tape &t, Var a) { return conv2d({t.constant(in), 6, 5}, a, t.constant(bias), 3, 2).features; },
                       weight);
    expect_op_gradient([&](Tape &t, Var a) { return conv2d({t.constant(in), 6, 5}, t.constant(weight), a, 3, 1).features; },
                       bias);
}

TEST(SparseConv3d, MatchesDenseConvolution) {
    Rng rng(8);
    const Lattice lat;
    for (const std::vector<VoxelCoord> &coords : {dense_coords(4), random_coords(25, 5, rng)}) {
        const SparseVoxelGrid g = random_grid(lat, coords, 3, rng);
        const Tensor weight = random_tensor(27 * 3, 2, rng);
        const Tensor bias = random_tensor(1, 2, rng);
        Tape t;
        const GridVar out = sparse_conv3d(constant_grid(t, g), t.constant(weight), t.constant(bias));
        EXPECT_EQ(out.index, g.index);
        EXPECT_LT(max_abs_diff(out.features.value(), oracle::dense_conv(g, weight, bias)), 1e-9);
    }
}

TEST(SparseConv3d, InsertionOrderIrrelevant) {
    Rng rng(9);
    const Lattice lat;
    std::vector<VoxelCoord> coords = random_coords(30, 5, rng);
    std::vector<std::pair<VoxelCoord, std::vector<double>>> cells;
    for (const VoxelCoord &c : coords) {
        cells.push_back({c, {c.x * 0.1, c.y - 0.5 * c.z}});
    }
    const SparseVoxelGrid a = SparseVoxelGrid::from_cells({lat, 2}, cells);
    std::shuffle(cells.begin(), cells.end(), rng);
    const SparseVoxelGrid b = SparseVoxelGrid::from_cells({lat, 2}, cells);
    const Tensor weight = random_tensor(27 * 2, 2, rng);
    const Tensor bias(1, 2);
    Tape t;
    const Tensor ya = sparse_conv3d(constant_grid(t, a), t.constant(weight), t.constant(bias)).features.value();
    const Tensor yb = sparse_conv3d(constant_grid(t, b), t.constant(weight), t.constant(bias)).features.value();
    EXPECT_EQ(ya, yb);
}

TEST(SparseConv3d, Gradients) {
    Rng rng(10);
    const SparseVoxelGrid g = random_grid(Lattice{}, random_coords(12, 3, rng), 2, rng);
    const Tensor weight = random_tensor(27 * 2, 3, rng);
    const Tensor bias = random_tensor(1, 3, rng);
    expect_op_gradient(
        [&](Tape &t, Var a) { return sparse_conv3d({g.index, a}, t.constant(weight), t.constant(bias)).features; },
        g.features);
    expect_op_gradient(
        [&](Tape &t, Var a) { return sparse_conv3d(constant_grid(t, g), a, t.constant(bias)).features; }, weight);
    expect_op_gradient(
        [&](Tape &t, Var a) { return sparse_conv3d(constant_grid(t, g), t.constant(weight), a).features; }, bias);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    ParameterStore p;
    p.add("w", Tensor(1, 1, 1.0));
    AdamState s;
    s.lr = 0.003;
    adam_step(s, p, {{"w", Tensor(1, 1, 0.5)}});
    EXPECT_NEAR(p.get("w")(0, 0), 0.997, 1e-7);
    EXPECT_EQ(s.step, 1);
}

TEST(Adam, MatchesReferenceRecurrence) {
    Rng rng(11);
    ParameterStore p;
    p.add("a", random_tensor(2, 3, rng));
    Tensor ext = random_tensor(4, 1, rng);
    std::vector<double> ref(p.get("a").data);
    std::vector<double> ref_ext(ext.data);
    std::vector<double> m(6, 0.0), v(6, 0.0), me(4, 0.0), ve(4, 0.0);
    AdamState s;
    s.lr = 0.01;
    auto reference = [&](std::vector<double> &x, std::vector<double> &mm, std::vector<double> &vv,
                         const Tensor &g, int step) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            mm[i] = 0.9 * mm[i] + 0.1 * g.data[i];
            vv[i] = 0.999 * vv[i] + 0.001 * g.data[i] * g.data[i];
            const double mh = mm[i] / (1 - std::pow(0.9, step));
            const double vh = vv[i] / (1 - std::pow(0.999, step));
            x[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
        }
    };
    for (int step = 1; step <= 2; ++step) {
        const Tensor g = random_tensor(2, 3, rng);
        const Tensor ge = random_tensor(4, 1, rng);
        const ExternalParam e{"grid", &ext, &ge};
        adam_step(s, p, {{"a", g}}, {&e, 1});
        reference(ref, m, v, g, step);
        reference(ref_ext, me, ve, ge, step);
    }
    for (std::size_t i = 0; i < ref.size(); ++i) {
        EXPECT_NEAR(p.get("a").data[i], ref[i], 1e-12);
    }
    for (std::size_t i = 0; i < ref_ext.size(); ++i) {
        EXPECT_NEAR(ext.data[i], ref_ext[i], 1e-12);
    }
}

TEST(Adam, NonFiniteGradientRejectedWithoutSideEffects) {
    ParameterStore p;
    p.add("a", Tensor(1, 2, 1.0));
    p.add("b", Tensor(1, 1, 1.0));
    AdamState s;
    const ParameterStore before = p;
    EXPECT_THROW(adam_step(s, p, {{"a", Tensor(1, 2, 0.1)}, {"b", Tensor(1, 1, std::nan(""))}}), std::runtime_error);
    EXPECT_EQ(p, before);
    EXPECT_EQ(s.step, 0);
}

TEST(Adam, VanishingLearningRateKeepsParameters) {
    Rng rng(12);
    ParameterStore p;
    p.add("a", random_tensor(3, 3, rng));
    const ParameterStore before = p;
    AdamState s;
    s.lr = 0.0;
    adam_step(s, p, {{"a", random_tensor(3, 3, rng)}});
    EXPECT_EQ(p, before);
}

TEST(Init, FanInUniformBoundsAndDeterminism) {
    Rng a(13);
    Rng b(13);
    const Tensor x = fan_in_uniform(20, 30, 20, a);
    EXPECT_EQ(x, fan_in_uniform(20, 30, 20, b));
    const double bound = std::sqrt(6.0 / 20);
    for (double v : x.data) {
        EXPECT_LE(std::abs(v), bound);
    }
}
