// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/parameters.hpp"
#include "voxfuse/sparse_grid.hpp"
#include "voxfuse/tape.hpp"

#include <string>
#include <vector>

namespace voxfuse {

enum class Activation { none, relu, sigmoid, tanh, softplus };

Var activate(Var x, Activation a);

/// Parameters "<prefix>.<i>.weight" (in x out) and "<prefix>.<i>.bias" (1 x out)
/// for consecutive sizes.
void add_mlp_params(ParameterStore &store, const std::string &prefix, const std::vector<int> &sizes, Rng &rng);

/// Affine layers of "<prefix>.0" .. "<prefix>.<layers-1>" with `hidden` after
/// every layer but the last, which gets `output`. Throws
/// std::invalid_argument when the input width does not match the first layer.
Var mlp_forward(Tape &tape, const std::string &prefix, int layers, Var x, Activation hidden, Activation output);

/// 2D feature map stored as (height*width) x channels, row = y*width + x.
struct FeatureMap2D {
    Var features;
    int height = 0;
    int width = 0;
};

/// Weight is (k*k*Cin) x Cout with row (ky*k + kx)*Cin + ci.
void add_conv2d_params(ParameterStore &store, const std::string &prefix, int kernel, int in_channels, int out_channels,
                       Rng &rng);

/// Cross-correlation with zero padding (kernel-1)/2, so the output is
/// ceil(H/stride) x ceil(W/stride).
FeatureMap2D conv2d(const FeatureMap2D &input, Var weight, Var bias, int kernel, int stride);

/// Weight is (27*Cin) x Cout, block k holding the taps for stencil_offset(k).
void add_sparse_conv_params(ParameterStore &store, const std::string &prefix, int in_channels, int out_channels,
                            Rng &rng);

/// Submanifold 3x3x3 convolution: the output lives on the input's active
/// set and absent neighbors contribute zero.
GridVar sparse_conv3d(const GridVar &input, Var weight, Var bias);

/// Stack of "<prefix>.<i>" sparse convolutions with `hidden` between layers
/// and `output` after the last.
GridVar sparse_conv_stack(Tape &tape, const std::string &prefix, int layers, const GridVar &input, Activation hidden,
                          Activation output);

} // namespace voxfuse
