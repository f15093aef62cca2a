// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace voxfuse {

void ParameterStore::add(const std::string &name, Tensor value) {
    if (params_.count(name) != 0) {
        throw std::invalid_argument("parameter '" + name + "' already exists");
    }
    if (!all_finite(value)) {
        throw std::invalid_argument("parameter '" + name + "' has non-finite values");
    }
    params_.emplace(name, std::move(value));
}

const Tensor &ParameterStore::get(const std::string &name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw std::out_of_range("unknown parameter '" + name + "'");
    }
    return it->second;
}

void ParameterStore::set(const std::string &name, Tensor value) {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw std::out_of_range("unknown parameter '" + name + "'");
    }
    if (!it->second.same_shape(value)) {
        throw std::invalid_argument("parameter '" + name + "' shape " + it->second.shape_string() +
                                    " cannot change to " + value.shape_string());
    }
    it->second = std::move(value);
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto &[name, t] : params_) {
        n += t.size();
    }
    return n;
}

Tensor fan_in_uniform(int rows, int cols, int fan_in, Rng &rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(std::max(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(rows, cols);
    for (double &v : t.data) {
        v = dist(rng);
    }
    return t;
}

namespace {

void check_gradient(const std::string &name, const Tensor &value, const Tensor &grad) {
    if (!value.same_shape(grad)) {
        throw std::runtime_error("adam: gradient for '" + name + "' has shape " + grad.shape_string() +
                                 ", parameter has " + value.shape_string());
    }
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!std::isfinite(grad.data[i])) {
            std::ostringstream msg;
            msg << "adam: non-finite gradient in '" << name << "' at flat index " << i << " (value "
                << grad.data[i] << ")";
            throw std::runtime_error(msg.str());
        }
    }
}

void update(AdamState &s, const std::string &name, Tensor &value, const Tensor &grad) {
    Tensor &m = s.first_moment[name];
    Tensor &v = s.second_moment[name];
    if (!m.same_shape(value)) {
        m = Tensor(value.rows, value.cols, 0.0);
        v = Tensor(value.rows, value.cols, 0.0);
    }
    const double step = static_cast<double>(s.step);
    const double c1 = 1.0 - std::pow(s.beta1, step);
    const double c2 = 1.0 - std::pow(s.beta2, step);
    for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = grad.data[i];
        m.data[i] = s.beta1 * m.data[i] + (1.0 - s.beta1) * g;
        v.data[i] = s.beta2 * v.data[i] + (1.0 - s.beta2) * g * g;
        const double m_hat = m.data[i] / c1;
        const double v_hat = v.data[i] / c2;
        value.data[i] -= s.lr * m_hat / (std::sqrt(v_hat) + s.eps);
    }
}

} // namespace

void adam_step(AdamState &state, ParameterStore &params, const Gradients &grads, std::span<const ExternalParam> external) {
    for (const auto &[name, g] : grads) {
        check_gradient(name, params.get(name), g);
    }
    for (const auto &e : external) {
        check_gradient(e.name, *e.value, *e.grad);
    }
    ++state.step;
    for (const auto &[name, g] : grads) {
        update(state, name, params.params_.at(name), g);
    }
    for (const auto &e : external) {
        update(state, e.name, *e.value, *e.grad);
    }
}

} // namespace voxfuse
