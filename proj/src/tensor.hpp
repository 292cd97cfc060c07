// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace can {

/// Dense row-major tensor of 64-bit floats. A plain value type: cheap to
/// move, copied explicitly, never aliased. Zero-length axes are legal so
/// that e.g. concatenation with an empty block is well defined.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);
    Tensor(std::vector<int64_t> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros(std::vector<int64_t> shape);
    static Tensor full(std::vector<int64_t> shape, double v);

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t axis) const;
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }

    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }

    /// Value of a one-element tensor.
    double item() const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    std::string shape_str() const;

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Raw value kernels. No gradient tracking; the autodiff layer wraps these.
// ---------------------------------------------------------------------------
namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sqrt(const Tensor& a);

/// a[m x k] @ b[k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// a[m x k] @ b[n x k]^T -> [m x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// a[k x m]^T @ b[k x n] -> [m x n]
Tensor matmul_tn(const Tensor& a, const Tensor& b);

Tensor concat(const Tensor& a, const Tensor& b, int64_t axis);
Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len);

struct ReduceMax {
    Tensor values;               // input shape with `axis` removed
    std::vector<int64_t> argmax; // winning index along `axis`, per output element
};

/// Max over one axis. Ties resolve to the lowest index along the axis.
ReduceMax reduce_max(const Tensor& x, int64_t axis);
Tensor reduce_mean(const Tensor& x, int64_t axis);
Tensor sum_all(const Tensor& x);

/// Numerically stable softmax over the last axis (1-D or row-wise 2-D).
Tensor softmax(const Tensor& x);
/// Unit-normalize over the last axis; vectors with norm <= eps divide by eps.
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);

double squared_distance(std::span<const double> a, std::span<const double> b);

// Axis decomposition helper: shape = [outer, shape[axis], inner].
struct AxisSplit {
    int64_t outer;
    int64_t len;
    int64_t inner;
};
AxisSplit split_axis(const Tensor& x, int64_t axis);

} // namespace ops
} // namespace can
