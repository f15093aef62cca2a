// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/tape.hpp"

#include "voxfuse/parameters.hpp"

#include <stdexcept>

namespace voxfuse {

Precision parse_precision(const std::string &name) {
    if (name == "f64") {
        return Precision::f64;
    }
    if (name == "f32") {
        return Precision::f32;
    }
    throw std::invalid_argument("unknown precision '" + name + "' (expected f32 or f64)");
}

std::string to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

const Tensor &Var::value() const {
    if (!valid()) {
        throw std::logic_error("Var::value on an unbound handle");
    }
    return tape->value(*this);
}

Tape::Node &Tape::node(Var v) {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
        throw std::logic_error("Var does not belong to this tape");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node &Tape::node(Var v) const {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
        throw std::logic_error("Var does not belong to this tape");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), nullptr, nullptr, false});
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::variable(Tensor value) {
    nodes_.push_back(Node{std::move(value), nullptr, nullptr, true});
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var &in : inputs) {
        needs = needs || node(in).requires_grad;
    }
    nodes_.push_back(Node{std::move(value), nullptr, needs ? std::move(fn) : nullptr, needs});
    return {this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor &Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor &Tape::grad_buffer(Var v) {
    Node &n = node(v);
    if (!n.grad) {
        n.grad = std::make_unique<Tensor>(n.value.rows, n.value.cols, 0.0);
    }
    return *n.grad;
}

const Tensor *Tape::grad(Var v) const { return node(v).grad.get(); }

void Tape::backward(Var loss) {
    const Node &root = node(loss);
    if (root.value.rows != 1 || root.value.cols != 1) {
        throw std::invalid_argument("backward: loss must be a scalar, got " + root.value.shape_string());
    }
    if (backward_done_) {
        throw std::logic_error("backward: tape already differentiated");
    }
    backward_done_ = true;
    if (!root.requires_grad) {
        return;
    }
    grad_buffer(loss).data[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node &n = nodes_[static_cast<std::size_t>(id)];
        if (!n.grad || !n.backward) {
            continue;
        }
        // The closure may append nothing, but it reads this node's grad while
        // writing into earlier nodes; std::deque keeps the reference stable.
        n.backward(*this, *n.grad);
    }
}

void Tape::bind(const ParameterStore &store, std::vector<std::string> frozen_prefixes) {
    store_ = &store;
    frozen_ = std::move(frozen_prefixes);
    bound_.clear();
}

bool Tape::is_frozen(const std::string &name) const {
    for (const auto &prefix : frozen_) {
        if (name.compare(0, prefix.size(), prefix) == 0) {
            return true;
        }
    }
    return false;
}

Var Tape::param(const std::string &name) {
    if (store_ == nullptr) {
        throw std::logic_error("Tape::param: no parameter store bound");
    }
    if (auto it = bound_.find(name); it != bound_.end()) {
        return it->second;
    }
    const Tensor &value = store_->get(name);
    Var v = is_frozen(name) ? constant(value) : variable(value);
    bound_.emplace(name, v);
    return v;
}

Gradients Tape::parameter_gradients() const {
    Gradients out;
    for (const auto &[name, v] : bound_) {
        if (!requires_grad(v)) {
            continue;
        }
        const Tensor *g = grad(v);
        out.emplace(name, g ? *g : Tensor(value(v).rows, value(v).cols, 0.0));
    }
    return out;
}

} // namespace voxfuse
