// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <unordered_map>

#include "tensor.hpp"

namespace can {

/// A named, trainable tensor. `grad` always matches `value` in shape and is
/// accumulated into by Tape::backward; callers zero it between steps.
struct Parameter {
    Tensor value;
    Tensor grad;
    std::string name;

    Parameter(std::string n, Tensor v)
        : value(std::move(v)), grad(Tensor::zeros(value.shape())), name(std::move(n)) {}

    Parameter(const Parameter&) = delete;
    Parameter& operator=(const Parameter&) = delete;
    Parameter(Parameter&&) = default;
    Parameter& operator=(Parameter&&) = default;

    void zero_grad() { std::fill(grad.data().begin(), grad.data().end(), 0.0); }
};

using Var = int32_t;

/// Define-by-run reverse-mode tape. A forward pass records one node per
/// operation; backward() walks the record once in reverse and is then spent.
/// Rebuild the tape for every forward pass.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor v);
    /// Leaf bound to `p`; backward adds d(loss)/dp into p.grad. Registering
    /// the same parameter twice yields the same node.
    Var param(Parameter& p);

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;
    int64_t size() const { return static_cast<int64_t>(nodes_.size()); }

    // ---- differentiable core ops ----
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var relu(Var a);
    Var sqrt(Var a);
    Var matmul(Var a, Var b);
    /// a @ b^T
    Var matmul_nt(Var a, Var b);
    Var concat(Var a, Var b, int64_t axis);
    Var slice(Var x, int64_t axis, int64_t start, int64_t len);
    Var reduce_max(Var x, int64_t axis);
    Var reduce_mean(Var x, int64_t axis);
    Var sum_all(Var x);
    Var reshape(Var x, std::vector<int64_t> shape);
    /// Elementwise sum of same-shaped vars (scalar averaging in losses).
    Var add_n(std::span<const Var> xs);

    /// Extension point for modules that bring their own kernels (conv,
    /// pooling, ...). `backprop` receives the output gradient and pushes
    /// input gradients via accumulate().
    Var make_node(Tensor value, std::span<const Var> inputs,
                  std::function<void(Tape&, const Tensor&)> backprop);

    /// Install the backward closure after node creation, for closures that
    /// need the output Var itself. No-op on nodes that do not track grads.
    void set_backprop(Var v, std::function<void(Tape&, const Tensor&)> backprop);

    void accumulate(Var v, const Tensor& g);
    void accumulate(Var v, Tensor&& g);

    /// Reverse sweep from a scalar loss. One shot: calling backward on a
    /// spent tape is an error, as is a non-scalar loss.
    void backward(Var loss);

private:
    struct Node {
        Tensor value;
        Tensor grad; // empty until touched by the reverse sweep
        bool requires_grad = false;
        Parameter* bound = nullptr;
        std::function<void(Tape&, const Tensor&)> backprop;
    };

    Node& node(Var v);
    const Node& node(Var v) const;

    std::vector<Node> nodes_;
    std::unordered_map<Parameter*, Var> param_vars_;
    bool consumed_ = false;
};

} // namespace can
