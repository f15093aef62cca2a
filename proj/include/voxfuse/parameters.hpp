// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/tape.hpp"
#include "voxfuse/tensor.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <random>
#include <string>

namespace voxfuse {

using Rng = std::mt19937_64;

struct AdamState {
    double lr = 0.003;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::map<std::string, Tensor> first_moment;
    std::map<std::string, Tensor> second_moment;

    bool operator==(const AdamState &o) const = default;
};

/// A learnable tensor owned outside the store, e.g. per-voxel grid features
/// during fine-tuning.
struct ExternalParam {
    std::string name;
    Tensor *value = nullptr;
    const Tensor *grad = nullptr;
};

/// Named learnable tensors. Names are unique and shapes never change once a
/// parameter exists; iteration order is lexicographic by name.
class ParameterStore {
  public:
    void add(const std::string &name, Tensor value);
    bool contains(const std::string &name) const { return params_.count(name) != 0; }
    const Tensor &get(const std::string &name) const;
    /// Replaces the value of an existing parameter; the shape must match.
    void set(const std::string &name, Tensor value);

    const std::map<std::string, Tensor> &all() const { return params_; }
    std::size_t count() const { return params_.size(); }
    std::size_t scalar_count() const;

    std::uint64_t seed = 0;

    bool operator==(const ParameterStore &o) const = default;

  private:
    friend void adam_step(AdamState &, ParameterStore &, const Gradients &, std::span<const ExternalParam>);
    std::map<std::string, Tensor> params_;
};

/// Fan-in scaled uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
Tensor fan_in_uniform(int rows, int cols, int fan_in, Rng &rng);

/// One bias-corrected Adam update over the parameters present in grads plus
/// any external tensors. Throws std::runtime_error naming the offending tensor
/// if a gradient is non-finite or misshapen; nothing is modified in that case.
void adam_step(AdamState &state, ParameterStore &params, const Gradients &grads,
               std::span<const ExternalParam> external = {});

} // namespace voxfuse
