// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxfuse {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major 2D array of doubles. Every value flowing through the
/// autodiff tape is one of these; higher-rank data (feature maps, conv
/// kernels) is flattened into rows with the extra dimensions tracked by the op.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {
        if (r < 0 || c < 0) {
            throw std::invalid_argument("Tensor: negative dimension");
        }
    }

    static Tensor from(int r, int c, std::vector<double> values) {
        if (values.size() != static_cast<std::size_t>(r) * static_cast<std::size_t>(c)) {
            throw std::invalid_argument("Tensor::from: value count does not match shape");
        }
        Tensor t;
        t.rows = r;
        t.cols = c;
        t.data = std::move(values);
        return t;
    }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    double &operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    std::span<double> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
    std::span<const double> row(int r) const {
        return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }

    bool same_shape(const Tensor &o) const { return rows == o.rows && cols == o.cols; }
    std::string shape_string() const { return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")"; }

    bool operator==(const Tensor &o) const = default;
};

inline Eigen::Map<RowMatrix> as_matrix(Tensor &t) { return {t.data.data(), t.rows, t.cols}; }
inline Eigen::Map<const RowMatrix> as_matrix(const Tensor &t) { return {t.data.data(), t.rows, t.cols}; }

inline bool all_finite(const Tensor &t) {
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

} // namespace voxfuse
