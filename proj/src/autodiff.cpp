// SPDX-License-Identifier: Apache-2.0

#include "autodiff.hpp"

#include <cmath>

namespace can {

namespace {

void add_into(Tensor& dst, const Tensor& src) {
    for (int64_t i = 0; i < dst.numel(); ++i) {
        dst[i] += src[i];
    }
}

} // namespace

Tape::Node& Tape::node(Var v) {
    require(v >= 0 && v < size(), ErrorKind::internal, "tape: variable out of range");
    return nodes_[static_cast<size_t>(v)];
}

const Tape::Node& Tape::node(Var v) const {
    require(v >= 0 && v < size(), ErrorKind::internal, "tape: variable out of range");
    return nodes_[static_cast<size_t>(v)];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Var Tape::constant(Tensor v) {
    Node n;
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
    if (auto it = param_vars_.find(&p); it != param_vars_.end()) {
        return it->second;
    }
    Node n;
    n.value = p.value;
    n.requires_grad = true;
    n.bound = &p;
    nodes_.push_back(std::move(n));
    const Var v = static_cast<Var>(nodes_.size() - 1);
    param_vars_.emplace(&p, v);
    return v;
}

Var Tape::make_node(Tensor value, std::span<const Var> inputs,
                    std::function<void(Tape&, const Tensor&)> backprop) {
    Node n;
    n.value = std::move(value);
    for (Var in : inputs) {
        if (node(in).requires_grad) {
            n.requires_grad = true;
            break;
        }
    }
    if (n.requires_grad) {
        n.backprop = std::move(backprop);
    }
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
}

void Tape::set_backprop(Var v, std::function<void(Tape&, const Tensor&)> backprop) {
    Node& n = node(v);
    if (n.requires_grad) {
        n.backprop = std::move(backprop);
    }
}

void Tape::accumulate(Var v, const Tensor& g) {
    Node& n = node(v);
    if (!n.requires_grad) {
        return;
    }
    if (n.grad.numel() == 0 && g.numel() != 0) {
        n.grad = g;
    } else {
        add_into(n.grad, g);
    }
}

void Tape::accumulate(Var v, Tensor&& g) {
    Node& n = node(v);
    if (!n.requires_grad) {
        return;
    }
    if (n.grad.numel() == 0 && g.numel() != 0) {
        n.grad = std::move(g);
    } else {
        add_into(n.grad, g);
    }
}

void Tape::backward(Var loss) {
    require(!consumed_, ErrorKind::invalid_argument,
            "tape already consumed by a previous backward pass");
    require(value(loss).numel() == 1, ErrorKind::invalid_argument,
            "backward requires a scalar loss, got " + value(loss).shape_str());
    consumed_ = true;
    if (!node(loss).requires_grad) {
        return; // loss does not depend on any parameter
    }
    node(loss).grad = Tensor::full(value(loss).shape(), 1.0);
    for (Var v = static_cast<Var>(nodes_.size()) - 1; v >= 0; --v) {
        Node& n = node(v);
        if (!n.requires_grad || n.grad.numel() == 0) {
            continue;
        }
        if (n.bound != nullptr) {
            require(n.bound->grad.same_shape(n.grad), ErrorKind::internal,
                    "parameter gradient shape drifted for " + n.bound->name);
            add_into(n.bound->grad, n.grad);
        } else if (n.backprop) {
            n.backprop(*this, n.grad);
        }
    }
}

// ---------------------------------------------------------------------------
// Core ops
// ---------------------------------------------------------------------------

Var Tape::add(Var a, Var b) {
    Tensor out = ops::add(value(a), value(b));
    const Var in[] = {a, b};
    return make_node(std::move(out), in, [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var Tape::sub(Var a, Var b) {
    Tensor out = ops::sub(value(a), value(b));
    const Var in[] = {a, b};
    return make_node(std::move(out), in, [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        t.accumulate(b, ops::scale(g, -1.0));
    });
}

Var Tape::mul(Var a, Var b) {
    Tensor out = ops::mul(value(a), value(b));
    const Var in[] = {a, b};
    return make_node(std::move(out), in, [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, ops::mul(g, t.value(b)));
        t.accumulate(b, ops::mul(g, t.value(a)));
    });
}

Var Tape::scale(Var a, double s) {
    Tensor out = ops::scale(value(a), s);
    const Var in[] = {a};
    return make_node(std::move(out), in, [a, s](Tape& t, const Tensor& g) {
        t.accumulate(a, ops::scale(g, s));
    });
}

Var Tape::add_scalar(Var a, double s) {
    Tensor out = ops::add_scalar(value(a), s);
    const Var in[] = {a};
    return make_node(std::move(out), in,
                     [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
}

Var Tape::relu(Var a) {
    Tensor out = ops::relu(value(a));
    const Var in[] = {a};
    return make_node(std::move(out), in, [a](Tape& t, const Tensor& g) {
        const Tensor& x = t.value(a);
        Tensor gx(g.shape());
        for (int64_t i = 0; i < g.numel(); ++i) {
            gx[i] = x[i] > 0.0 ? g[i] : 0.0;
        }
        t.accumulate(a, std::move(gx));
    });
}

Var Tape::sqrt(Var a) {
    Tensor out = ops::sqrt(value(a));
    const Var in[] = {a};
    const Var self = make_node(std::move(out), in, nullptr);
    set_backprop(self, [a, self](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(self);
        Tensor gx(g.shape());
        for (int64_t i = 0; i < g.numel(); ++i) {
            gx[i] = g[i] * 0.5 / y[i];
        }
        t.accumulate(a, std::move(gx));
    });
    return self;
}

Var Tape::matmul(Var a, Var b) {
    Tensor out = ops::matmul(value(a), value(b));
    const Var in[] = {a, b};
    return make_node(std::move(out), in, [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, ops::matmul_nt(g, t.value(b)));
        t.accumulate(b, ops::matmul_tn(t.value(a), g));
    });
}

Var Tape::matmul_nt(Var a, Var b) {
    Tensor out = ops::matmul_nt(value(a), value(b));
    const Var in[] = {a, b};
    return make_node(std::move(out), in, [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, ops::matmul(g, t.value(b)));
        t.accumulate(b, ops::matmul_tn(g, t.value(a)));
    });
}

Var Tape::concat(Var a, Var b, int64_t axis) {
    Tensor out = ops::concat(value(a), value(b), axis);
    const int64_t len_a = value(a).shape()[static_cast<size_t>(axis)];
    const int64_t len_b = value(b).shape()[static_cast<size_t>(axis)];
    const Var in[] = {a, b};
    return make_node(std::move(out), in,
                     [a, b, axis, len_a, len_b](Tape& t, const Tensor& g) {
                         if (len_a > 0) {
                             t.accumulate(a, ops::slice(g, axis, 0, len_a));
                         }
                         if (len_b > 0) {
                             t.accumulate(b, ops::slice(g, axis, len_a, len_b));
                         }
                     });
}

Var Tape::slice(Var x, int64_t axis, int64_t start, int64_t len) {
    Tensor out = ops::slice(value(x), axis, start, len);
    const Var in[] = {x};
    return make_node(std::move(out), in, [x, axis, start, len](Tape& t, const Tensor& g) {
        // scatter into a zero tensor of the input's shape
        const Tensor& xin = t.value(x);
        auto s = ops::split_axis(xin, axis);
        Tensor gx = Tensor::zeros(xin.shape());
        for (int64_t o = 0; o < s.outer; ++o) {
            const double* src = g.data().data() + o * len * s.inner;
            double* dst = gx.data().data() + (o * s.len + start) * s.inner;
            for (int64_t i = 0; i < len * s.inner; ++i) {
                dst[i] += src[i];
            }
        }
        t.accumulate(x, std::move(gx));
    });
}

Var Tape::reduce_max(Var x, int64_t axis) {
    auto r = ops::reduce_max(value(x), axis);
    const Var in[] = {x};
    return make_node(std::move(r.values), in,
                     [x, axis, argmax = std::move(r.argmax)](Tape& t, const Tensor& g) {
                         const Tensor& xin = t.value(x);
                         auto s = ops::split_axis(xin, axis);
                         Tensor gx = Tensor::zeros(xin.shape());
                         for (int64_t o = 0; o < s.outer; ++o) {
                             for (int64_t in_i = 0; in_i < s.inner; ++in_i) {
                                 const int64_t win = argmax[static_cast<size_t>(o * s.inner + in_i)];
                                 gx[(o * s.len + win) * s.inner + in_i] += g[o * s.inner + in_i];
                             }
                         }
                         t.accumulate(x, std::move(gx));
                     });
}

Var Tape::reduce_mean(Var x, int64_t axis) {
    Tensor out = ops::reduce_mean(value(x), axis);
    const Var in[] = {x};
    return make_node(std::move(out), in, [x, axis](Tape& t, const Tensor& g) {
        const Tensor& xin = t.value(x);
        auto s = ops::split_axis(xin, axis);
        const double inv = 1.0 / static_cast<double>(s.len);
        Tensor gx(xin.shape());
        for (int64_t o = 0; o < s.outer; ++o) {
            for (int64_t j = 0; j < s.len; ++j) {
                for (int64_t in_i = 0; in_i < s.inner; ++in_i) {
                    gx[(o * s.len + j) * s.inner + in_i] = g[o * s.inner + in_i] * inv;
                }
            }
        }
        t.accumulate(x, std::move(gx));
    });
}

Var Tape::sum_all(Var x) {
    Tensor out = ops::sum_all(value(x));
    const Var in[] = {x};
    return make_node(std::move(out), in, [x](Tape& t, const Tensor& g) {
        t.accumulate(x, Tensor::full(t.value(x).shape(), g.item()));
    });
}

Var Tape::reshape(Var x, std::vector<int64_t> shape) {
    const Tensor& xin = value(x);
    Tensor out(shape, std::vector<double>(xin.data().begin(), xin.data().end()));
    const Var in[] = {x};
    return make_node(std::move(out), in, [x](Tape& t, const Tensor& g) {
        const Tensor& xin2 = t.value(x);
        t.accumulate(x, Tensor(xin2.shape(),
                               std::vector<double>(g.data().begin(), g.data().end())));
    });
}

Var Tape::add_n(std::span<const Var> xs) {
    require(!xs.empty(), ErrorKind::invalid_argument, "add_n: empty operand list");
    Tensor out = value(xs[0]);
    for (size_t i = 1; i < xs.size(); ++i) {
        out = ops::add(out, value(xs[i]));
    }
    return make_node(std::move(out), xs,
                     [ins = std::vector<Var>(xs.begin(), xs.end())](Tape& t, const Tensor& g) {
                         for (Var v : ins) {
                             t.accumulate(v, g);
                         }
                     });
}

} // namespace can
