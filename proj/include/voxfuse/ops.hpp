// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/tape.hpp"

#include <vector>

namespace voxfuse::ops {

// Elementwise; operands must share a shape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// scale * a + shift
Var affine(Var a, double scale, double shift);

Var relu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var softplus(Var a);

/// (n x k) * (k x m)
Var matmul(Var a, Var b);
/// x * w + b, with b a 1 x m row broadcast over rows.
Var linear(Var x, Var w, Var b);

Var concat_cols(const std::vector<Var> &parts);
Var slice_cols(Var a, int begin, int count);

/// out[i] = a[rows[i]], or a zero row where rows[i] < 0.
Var gather_rows(Var a, std::vector<int> rows);

/// Places rows of several sources into an n_rows x cols output. Every
/// destination row may be written by at most one source; unwritten rows are 0.
struct RowSource {
    Var src;
    std::vector<int> src_rows;
    std::vector<int> dst_rows;
};
Var assemble_rows(int n_rows, int cols, std::vector<RowSource> sources);

Var sum(Var a);
/// Mean of (pred - target)^2 over all elements.
Var mse(Var pred, const Tensor &target);

/// [f, sin(pi f), cos(pi f), sin(2 pi f), cos(2 pi f), ..., cos(2^(L-1) pi f)]
/// applied row-wise; an n x C input becomes n x C(2L+1).
Var positional_encoding(Var features, int frequencies);

namespace detail {
/// C (+)= op(A) * op(B) on row-major buffers; op transposes when requested.
/// Precision::f32 evaluates the product in single precision.
void gemm(const Tensor &a, bool trans_a, const Tensor &b, bool trans_b, Tensor &c, bool accumulate, Precision p);
} // namespace detail

} // namespace voxfuse::ops
