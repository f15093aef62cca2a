// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/tensor.hpp"

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace voxfuse {

class Tape;
class ParameterStore;

enum class Precision { f64, f32 };

Precision parse_precision(const std::string &name);
std::string to_string(Precision p);

/// Handle to a value recorded on a Tape.
struct Var {
    Tape *tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor &value() const;
    int rows() const { return value().rows; }
    int cols() const { return value().cols; }
};

using Gradients = std::map<std::string, Tensor>;

/// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so the
/// recorded graph is acyclic and every node's inputs precede it.
///
/// Each recorded op carries a closure that receives the gradient of its output
/// and accumulates into its inputs via grad_buffer(). Nodes whose inputs need
/// no gradient skip their closure entirely.
class Tape {
  public:
    using BackwardFn = std::function<void(Tape &, const Tensor &grad_out)>;

    explicit Tape(Precision precision = Precision::f64) : precision_(precision) {}
    Tape(const Tape &) = delete;
    Tape &operator=(const Tape &) = delete;

    Var constant(Tensor value);
    Var variable(Tensor value);
    Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
        return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
    }

    const Tensor &value(Var v) const;
    bool requires_grad(Var v) const;

    /// Gradient accumulator for v, zero-filled on first access.
    Tensor &grad_buffer(Var v);
    /// Accumulated gradient, or nullptr when nothing reached v.
    const Tensor *grad(Var v) const;

    /// Reverse sweep from a 1x1 loss. May be called once per tape.
    void backward(Var loss);

    /// Binds a parameter store. Parameters whose names start with one of the
    /// frozen prefixes are recorded as constants.
    void bind(const ParameterStore &store, std::vector<std::string> frozen_prefixes = {});
    /// Leaf for a bound parameter, cached per name.
    Var param(const std::string &name);
    /// Gradients of every trainable parameter touched by param(); untouched
    /// trainable parameters that were requested still report zeros.
    Gradients parameter_gradients() const;
    bool is_frozen(const std::string &name) const;

    Precision precision() const { return precision_; }
    std::size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor value;
        std::unique_ptr<Tensor> grad;
        BackwardFn backward;
        bool requires_grad = false;
    };

    Node &node(Var v);
    const Node &node(Var v) const;

    std::deque<Node> nodes_;
    Precision precision_;
    const ParameterStore *store_ = nullptr;
    std::vector<std::string> frozen_;
    std::map<std::string, Var> bound_;
    bool backward_done_ = false;
};

} // namespace voxfuse
