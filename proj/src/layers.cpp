// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/layers.hpp"

#include "voxfuse/ops.hpp"

#include <memory>
#include <stdexcept>

namespace voxfuse {

using ops::detail::gemm;

Var activate(Var x, Activation a) {
    switch (a) {
    case Activation::none:
        return x;
    case Activation::relu:
        return ops::relu(x);
    case Activation::sigmoid:
        return ops::sigmoid(x);
    case Activation::tanh:
        return ops::tanh(x);
    case Activation::softplus:
        return ops::softplus(x);
    }
    throw std::invalid_argument("unknown activation");
}

void add_mlp_params(ParameterStore &store, const std::string &prefix, const std::vector<int> &sizes, Rng &rng) {
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
        const std::string base = prefix + "." + std::to_string(i);
        store.add(base + ".weight", fan_in_uniform(sizes[i], sizes[i + 1], sizes[i], rng));
        store.add(base + ".bias", Tensor(1, sizes[i + 1], 0.0));
    }
}

Var mlp_forward(Tape &tape, const std::string &prefix, int layers, Var x, Activation hidden, Activation output) {
    for (int i = 0; i < layers; ++i) {
        const std::string base = prefix + "." + std::to_string(i);
        Var w = tape.param(base + ".weight");
        Var b = tape.param(base + ".bias");
        if (x.cols() != w.rows()) {
            throw std::invalid_argument("mlp '" + prefix + "': layer " + std::to_string(i) + " expects " +
                                        std::to_string(w.rows()) + " inputs, got " + std::to_string(x.cols()));
        }
        x = activate(ops::linear(x, w, b), i + 1 < layers ? hidden : output);
    }
    return x;
}

void add_conv2d_params(ParameterStore &store, const std::string &prefix, int kernel, int in_channels, int out_channels,
                       Rng &rng) {
    const int fan_in = kernel * kernel * in_channels;
    store.add(prefix + ".weight", fan_in_uniform(fan_in, out_channels, fan_in, rng));
    store.add(prefix + ".bias", Tensor(1, out_channels, 0.0));
}

namespace {

void add_bias_rows(Tensor &out, const Tensor &bias) {
    for (int r = 0; r < out.rows; ++r) {
        auto o = out.row(r);
        for (int c = 0; c < out.cols; ++c) {
            o[c] += bias.data[static_cast<std::size_t>(c)];
        }
    }
}

void accumulate_bias_grad(Tensor &gb, const Tensor &g) {
    for (int r = 0; r < g.rows; ++r) {
        auto gr = g.row(r);
        for (int c = 0; c < g.cols; ++c) {
            gb.data[static_cast<std::size_t>(c)] += gr[c];
        }
    }
}

} // namespace

FeatureMap2D conv2d(const FeatureMap2D &input, Var weight, Var bias, int kernel, int stride) {
    const Tensor &x = input.features.value();
    const int cin = x.cols;
    const int h = input.height;
    const int w = input.width;
    if (x.rows != h * w) {
        throw std::invalid_argument("conv2d: feature rows do not match height*width");
    }
    if (kernel < 1 || kernel % 2 == 0 || stride < 1) {
        throw std::invalid_argument("conv2d: kernel must be odd and stride positive");
    }
    const Tensor &wv = weight.value();
    if (wv.rows != kernel * kernel * cin || bias.value().rows != 1 || bias.value().cols != wv.cols) {
        throw std::invalid_argument("conv2d: weight " + wv.shape_string() + " does not fit " + std::to_string(cin) +
                                    " input channels with kernel " + std::to_string(kernel));
    }
    const int pad = (kernel - 1) / 2;
    const int ho = (h + stride - 1) / stride;
    const int wo = (w + stride - 1) / stride;
    const int patch = kernel * kernel * cin;

    // im2col: one row per output pixel.
    auto cols = std::make_shared<Tensor>(ho * wo, patch);
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
            auto dst = cols->row(oy * wo + ox);
            for (int ky = 0; ky < kernel; ++ky) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= h) {
                    continue;
                }
                for (int kx = 0; kx < kernel; ++kx) {
                    const int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= w) {
                        continue;
                    }
                    auto src = x.row(iy * w + ix);
                    std::copy(src.begin(), src.end(), dst.begin() + (ky * kernel + kx) * cin);
                }
            }
        }
    }
    Tape &tape = *input.features.tape;
    const Precision prec = tape.precision();
    Tensor out(ho * wo, wv.cols);
    gemm(*cols, false, wv, false, out, false, prec);
    add_bias_rows(out, bias.value());

    Var in = input.features;
    Var result = tape.record(std::move(out), {in, weight, bias},
                             [=](Tape &tape, const Tensor &g) {
                                 if (tape.requires_grad(weight)) {
                                     gemm(*cols, true, g, false, tape.grad_buffer(weight), true, prec);
                                 }
                                 if (tape.requires_grad(bias)) {
                                     accumulate_bias_grad(tape.grad_buffer(bias), g);
                                 }
                                 if (!tape.requires_grad(in)) {
                                     return;
                                 }
                                 Tensor gcols(ho * wo, patch);
                                 gemm(g, false, tape.value(weight), true, gcols, false, prec);
                                 Tensor &gx = tape.grad_buffer(in);
                                 for (int oy = 0; oy < ho; ++oy) {
                                     for (int ox = 0; ox < wo; ++ox) {
                                         auto src = gcols.row(oy * wo + ox);
                                         for (int ky = 0; ky < kernel; ++ky) {
                                             const int iy = oy * stride + ky - pad;
                                             if (iy < 0 || iy >= h) {
                                                 continue;
                                             }
                                             for (int kx = 0; kx < kernel; ++kx) {
                                                 const int ix = ox * stride + kx - pad;
                                                 if (ix < 0 || ix >= w) {
                                                     continue;
                                                 }
                                                 auto dst = gx.row(iy * w + ix);
                                                 const int off = (ky * kernel + kx) * cin;
                                                 for (int c = 0; c < cin; ++c) {
                                                     dst[c] += src[off + c];
                                                 }
                                             }
                                         }
                                     }
                                 }
                             });
    return {result, ho, wo};
}

void add_sparse_conv_params(ParameterStore &store, const std::string &prefix, int in_channels, int out_channels,
                            Rng &rng) {
    const int fan_in = kStencilSize * in_channels;
    store.add(prefix + ".weight", fan_in_uniform(fan_in, out_channels, fan_in, rng));
    store.add(prefix + ".bias", Tensor(1, out_channels, 0.0));
}

namespace {

Tensor weight_block(const Tensor &w, int k, int cin) {
    Tensor block(cin, w.cols);
    std::copy(w.data.begin() + static_cast<std::ptrdiff_t>(k) * cin * w.cols,
              w.data.begin() + static_cast<std::ptrdiff_t>(k + 1) * cin * w.cols, block.data.begin());
    return block;
}

Tensor gather(const Tensor &src, const std::vector<int> &rows) {
    Tensor out(static_cast<int>(rows.size()), src.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto s = src.row(rows[i]);
        std::copy(s.begin(), s.end(), out.row(static_cast<int>(i)).begin());
    }
    return out;
}

void scatter_add(Tensor &dst, const std::vector<int> &rows, const Tensor &src) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto s = src.row(static_cast<int>(i));
        auto d = dst.row(rows[i]);
        for (int c = 0; c < src.cols; ++c) {
            d[c] += s[c];
        }
    }
}

} // namespace

GridVar sparse_conv3d(const GridVar &input, Var weight, Var bias) {
    const Tensor &x = input.features.value();
    const Tensor &wv = weight.value();
    const int cin = x.cols;
    const int cout = wv.cols;
    if (static_cast<std::size_t>(x.rows) != input.index->size()) {
        throw std::invalid_argument("sparse_conv3d: feature rows do not match the active set");
    }
    if (wv.rows != kStencilSize * cin || bias.value().rows != 1 || bias.value().cols != cout) {
        throw std::invalid_argument("sparse_conv3d: weight " + wv.shape_string() + " does not fit " +
                                    std::to_string(cin) + " input channels");
    }
    Tape &tape = *input.features.tape;
    const Precision prec = tape.precision();
    IndexPtr index = input.index;
    const auto &book = index->rulebook();

    Tensor out(x.rows, cout);
    for (int k = 0; k < kStencilSize; ++k) {
        const auto &e = book[static_cast<std::size_t>(k)];
        if (e.in_rows.empty()) {
            continue;
        }
        const Tensor wk = weight_block(wv, k, cin);
        if (k == kStencilCenter) {
            // Submanifold: the center tap pairs every row with itself.
            gemm(x, false, wk, false, out, true, prec);
            continue;
        }
        Tensor part(static_cast<int>(e.in_rows.size()), cout);
        gemm(gather(x, e.in_rows), false, wk, false, part, false, prec);
        scatter_add(out, e.out_rows, part);
    }
    add_bias_rows(out, bias.value());

    Var in = input.features;
    Var result = tape.record(std::move(out), {in, weight, bias}, [=](Tape &tape, const Tensor &g) {
        const Tensor &x = tape.value(in);
        const Tensor &wv = tape.value(weight);
        const auto &book = index->rulebook();
        const bool need_w = tape.requires_grad(weight);
        const bool need_x = tape.requires_grad(in);
        if (tape.requires_grad(bias)) {
            accumulate_bias_grad(tape.grad_buffer(bias), g);
        }
        for (int k = 0; k < kStencilSize; ++k) {
            const auto &e = book[static_cast<std::size_t>(k)];
            if (e.in_rows.empty()) {
                continue;
            }
            if (k == kStencilCenter) {
                if (need_w) {
                    Tensor gwk(cin, cout);
                    gemm(x, true, g, false, gwk, false, prec);
                    Tensor &gw = tape.grad_buffer(weight);
                    for (std::size_t i = 0; i < gwk.size(); ++i) {
                        gw.data[static_cast<std::size_t>(k) * cin * cout + i] += gwk.data[i];
                    }
                }
                if (need_x) {
                    gemm(g, false, weight_block(wv, k, cin), true, tape.grad_buffer(in), true, prec);
                }
                continue;
            }
            const Tensor gk = gather(g, e.out_rows);
            if (need_w) {
                Tensor gwk(cin, cout);
                gemm(gather(x, e.in_rows), true, gk, false, gwk, false, prec);
                Tensor &gw = tape.grad_buffer(weight);
                for (std::size_t i = 0; i < gwk.size(); ++i) {
                    gw.data[static_cast<std::size_t>(k) * cin * cout + i] += gwk.data[i];
                }
            }
            if (need_x) {
                Tensor gxk(static_cast<int>(e.in_rows.size()), cin);
                gemm(gk, false, weight_block(wv, k, cin), true, gxk, false, prec);
                scatter_add(tape.grad_buffer(in), e.in_rows, gxk);
            }
        }
    });
    return {index, result};
}

GridVar sparse_conv_stack(Tape &tape, const std::string &prefix, int layers, const GridVar &input, Activation hidden,
                          Activation output) {
    GridVar x = input;
    for (int i = 0; i < layers; ++i) {
        const std::string base = prefix + "." + std::to_string(i);
        Var w = tape.param(base + ".weight");
        Var b = tape.param(base + ".bias");
        if (w.rows() != kStencilSize * x.features.cols()) {
            throw std::invalid_argument("sparse conv stack '" + prefix + "': layer " + std::to_string(i) + " expects " +
                                        std::to_string(w.rows() / kStencilSize) + " channels, got " +
                                        std::to_string(x.features.cols()));
        }
        x = sparse_conv3d(x, w, b);
        x.features = activate(x.features, i + 1 < layers ? hidden : output);
    }
    return x;
}

} // namespace voxfuse
