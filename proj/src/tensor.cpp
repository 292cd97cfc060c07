// SPDX-License-Identifier: Apache-2.0

#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace can {

namespace {

int64_t checked_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        require(d >= 0, ErrorKind::invalid_argument, "tensor dimensions must be non-negative");
        n *= d;
    }
    return n;
}

} // namespace

Tensor::Tensor(std::vector<int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(checked_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    require(checked_numel(shape_) == static_cast<int64_t>(data_.size()),
            ErrorKind::invalid_argument,
            "tensor data length does not match shape " + shape_str());
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
}

int64_t Tensor::dim(int64_t axis) const {
    require(axis >= 0 && axis < ndim(), ErrorKind::invalid_argument,
            "axis " + std::to_string(axis) + " out of range for " + shape_str());
    return shape_[static_cast<size_t>(axis)];
}

double Tensor::item() const {
    require(numel() == 1, ErrorKind::invalid_argument,
            "item() requires a one-element tensor, got " + shape_str());
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape_.size(); ++i) {
        if (i) {
            os << 'x';
        }
        os << shape_[i];
    }
    os << ']';
    return os.str();
}

namespace ops {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    require(a.same_shape(b), ErrorKind::invalid_argument,
            std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

} // namespace

AxisSplit split_axis(const Tensor& x, int64_t axis) {
    require(axis >= 0 && axis < x.ndim(), ErrorKind::invalid_argument,
            "axis " + std::to_string(axis) + " out of range for " + x.shape_str());
    AxisSplit s{1, x.shape()[static_cast<size_t>(axis)], 1};
    for (int64_t i = 0; i < axis; ++i) {
        s.outer *= x.shape()[static_cast<size_t>(i)];
    }
    for (int64_t i = axis + 1; i < x.ndim(); ++i) {
        s.inner *= x.shape()[static_cast<size_t>(i)];
    }
    return s;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) {
        out[i] = a[i] + b[i];
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) {
        out[i] = a[i] - b[i];
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) {
        out[i] = a[i] * b[i];
    }
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) {
        out[i] = a[i] * s;
    }
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) {
        out[i] = a[i] + s;
    }
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) {
        out[i] = a[i] > 0.0 ? a[i] : 0.0;
    }
    return out;
}

Tensor sqrt(const Tensor& a) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) {
        require(a[i] >= 0.0, ErrorKind::numeric, "sqrt of negative value");
        out[i] = std::sqrt(a[i]);
    }
    return out;
}

namespace {

void require_matrix(const Tensor& t, const char* what) {
    require(t.ndim() == 2, ErrorKind::invalid_argument,
            std::string(what) + ": expected a matrix, got " + t.shape_str());
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    require(k == k2, ErrorKind::invalid_argument,
            "matmul: inner dimensions disagree " + a.shape_str() + " vs " + b.shape_str());
    Tensor out({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.data().data();
    for (int64_t i = 0; i < m; ++i) {
        double* c_row = pc + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            const double* b_row = pb + kk * n;
            for (int64_t j = 0; j < n; ++j) {
                c_row[j] += av * b_row[j];
            }
        }
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    require(k == b.dim(1), ErrorKind::invalid_argument,
            "matmul_nt: inner dimensions disagree " + a.shape_str() + " vs " + b.shape_str());
    Tensor out({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.data().data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            const double* ra = pa + i * k;
            const double* rb = pb + j * k;
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) {
                acc += ra[kk] * rb[kk];
            }
            pc[i * n + j] = acc;
        }
    }
    return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_tn");
    require_matrix(b, "matmul_tn");
    const int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    require(k == b.dim(0), ErrorKind::invalid_argument,
            "matmul_tn: inner dimensions disagree " + a.shape_str() + " vs " + b.shape_str());
    Tensor out({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.data().data();
    for (int64_t kk = 0; kk < k; ++kk) {
        const double* ra = pa + kk * m;
        const double* rb = pb + kk * n;
        for (int64_t i = 0; i < m; ++i) {
            const double av = ra[i];
            double* rc = pc + i * n;
            for (int64_t j = 0; j < n; ++j) {
                rc[j] += av * rb[j];
            }
        }
    }
    return out;
}

Tensor concat(const Tensor& a, const Tensor& b, int64_t axis) {
    require(a.ndim() == b.ndim(), ErrorKind::invalid_argument,
            "concat: rank mismatch " + a.shape_str() + " vs " + b.shape_str());
    require(axis >= 0 && axis < a.ndim(), ErrorKind::invalid_argument,
            "concat: axis " + std::to_string(axis) + " out of range for " + a.shape_str());
    for (int64_t i = 0; i < a.ndim(); ++i) {
        if (i != axis) {
            require(a.shape()[static_cast<size_t>(i)] == b.shape()[static_cast<size_t>(i)],
                    ErrorKind::invalid_argument,
                    "concat: shapes differ off the concat axis: " + a.shape_str() + " vs " +
                        b.shape_str());
        }
    }
    auto sa = split_axis(a, axis);
    auto sb = split_axis(b, axis);
    std::vector<int64_t> shape = a.shape();
    shape[static_cast<size_t>(axis)] = sa.len + sb.len;
    Tensor out(std::move(shape));
    const int64_t block_a = sa.len * sa.inner;
    const int64_t block_b = sb.len * sb.inner;
    for (int64_t o = 0; o < sa.outer; ++o) {
        double* dst = out.data().data() + o * (block_a + block_b);
        std::copy_n(a.data().data() + o * block_a, block_a, dst);
        std::copy_n(b.data().data() + o * block_b, block_b, dst + block_a);
    }
    return out;
}

Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len) {
    auto s = split_axis(x, axis);
    require(len >= 1, ErrorKind::invalid_argument, "slice: length must be >= 1");
    require(start >= 0 && start + len <= s.len, ErrorKind::invalid_argument,
            "slice: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                ") out of range for axis of size " + std::to_string(s.len));
    std::vector<int64_t> shape = x.shape();
    shape[static_cast<size_t>(axis)] = len;
    Tensor out(std::move(shape));
    for (int64_t o = 0; o < s.outer; ++o) {
        const double* src = x.data().data() + (o * s.len + start) * s.inner;
        std::copy_n(src, len * s.inner, out.data().data() + o * len * s.inner);
    }
    return out;
}

ReduceMax reduce_max(const Tensor& x, int64_t axis) {
    auto s = split_axis(x, axis);
    require(s.len >= 1, ErrorKind::invalid_argument, "reduce_max: empty axis");
    std::vector<int64_t> shape;
    for (int64_t i = 0; i < x.ndim(); ++i) {
        if (i != axis) {
            shape.push_back(x.shape()[static_cast<size_t>(i)]);
        }
    }
    ReduceMax r{Tensor(std::move(shape)), {}};
    r.argmax.resize(static_cast<size_t>(s.outer * s.inner));
    for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t in = 0; in < s.inner; ++in) {
            const double* base = x.data().data() + o * s.len * s.inner + in;
            double best = base[0];
            int64_t best_i = 0;
            for (int64_t j = 1; j < s.len; ++j) {
                const double v = base[j * s.inner];
                if (v > best) { // strict: ties keep the lowest index
                    best = v;
                    best_i = j;
                }
            }
            r.values[o * s.inner + in] = best;
            r.argmax[static_cast<size_t>(o * s.inner + in)] = best_i;
        }
    }
    return r;
}

Tensor reduce_mean(const Tensor& x, int64_t axis) {
    auto s = split_axis(x, axis);
    require(s.len >= 1, ErrorKind::invalid_argument, "reduce_mean: empty axis");
    std::vector<int64_t> shape;
    for (int64_t i = 0; i < x.ndim(); ++i) {
        if (i != axis) {
            shape.push_back(x.shape()[static_cast<size_t>(i)]);
        }
    }
    Tensor out(std::move(shape));
    const double inv = 1.0 / static_cast<double>(s.len);
    for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t in = 0; in < s.inner; ++in) {
            const double* base = x.data().data() + o * s.len * s.inner + in;
            double acc = 0.0;
            for (int64_t j = 0; j < s.len; ++j) {
                acc += base[j * s.inner];
            }
            out[o * s.inner + in] = acc * inv;
        }
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        acc += x[i];
    }
    return Tensor::scalar(acc);
}

namespace {

// 1-D or 2-D rows view: [rows, cols] with cols = last axis.
std::pair<int64_t, int64_t> rows_view(const Tensor& x, const char* what) {
    require(x.ndim() == 1 || x.ndim() == 2, ErrorKind::invalid_argument,
            std::string(what) + ": expected a vector or matrix, got " + x.shape_str());
    if (x.ndim() == 1) {
        return {1, x.dim(0)};
    }
    return {x.dim(0), x.dim(1)};
}

} // namespace

Tensor softmax(const Tensor& x) {
    auto [rows, cols] = rows_view(x, "softmax");
    require(cols >= 1, ErrorKind::invalid_argument, "softmax: empty axis");
    Tensor out(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * cols;
        double* o = out.data().data() + r * cols;
        double mx = in[0];
        for (int64_t j = 1; j < cols; ++j) {
            mx = std::max(mx, in[j]);
        }
        double z = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            z += o[j];
        }
        const double inv = 1.0 / z;
        for (int64_t j = 0; j < cols; ++j) {
            o[j] *= inv;
        }
    }
    return out;
}

Tensor l2_normalize(const Tensor& x, double eps) {
    auto [rows, cols] = rows_view(x, "l2_normalize");
    Tensor out(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * cols;
        double* o = out.data().data() + r * cols;
        double sq = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            sq += in[j] * in[j];
        }
        const double norm = std::sqrt(sq);
        const double inv = 1.0 / (norm > eps ? norm : eps);
        for (int64_t j = 0; j < cols; ++j) {
            o[j] = in[j] * inv;
        }
    }
    return out;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), ErrorKind::invalid_argument,
            "squared_distance: length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

} // namespace ops
} // namespace can
