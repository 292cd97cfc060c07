// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>

#include "autodiff.hpp"
#include "rng.hpp"

namespace can {

/// Pooling window geometry inferred from input/output sizes:
///   padding = 0,  stride = floor(IS / OS),  kernel = IS - (OS - 1) * stride.
/// The windows then tile the input exactly: (OS - 1) * stride + kernel == IS.
struct PoolGeometry {
    int64_t input_size;
    int64_t output_size;
    int64_t stride;
    int64_t kernel;
    int64_t padding; // always 0
};

PoolGeometry adaptive_pool_params(int64_t input_size, int64_t output_size);

enum class PoolMode { max, avg };

// ---- tape ops -------------------------------------------------------------

/// Cross-correlation over [C,H,W] or [B,C,H,W]; weight [Cout,Cin,kh,kw],
/// optional bias [Cout]. Output height = floor((H + 2p - kh)/stride) + 1.
Var conv2d(Tape& t, Var x, Var weight, std::optional<Var> bias, int64_t stride,
           int64_t padding);

/// Pool [C,H,W] or [B,C,H,W] down to (out_h, out_w) with per-axis adaptive
/// windows. Max mode routes gradient to the winning element (lowest index on
/// ties); avg distributes uniformly.
Var adaptive_pool2d(Tape& t, Var x, int64_t out_h, int64_t out_w, PoolMode mode);

/// Stable softmax over the last axis of a vector or of each matrix row.
Var softmax(Tape& t, Var x);

/// Unit-normalize the last axis; rows with norm <= eps are divided by eps.
Var l2_normalize(Tape& t, Var x, double eps = 1e-12);

/// y[r] = x[r] + b for each row r of a matrix.
Var add_row_bias(Tape& t, Var x, Var bias);

// ---- layers ---------------------------------------------------------------

struct Conv2dLayer {
    Parameter weight;
    std::optional<Parameter> bias;
    int64_t stride;
    int64_t padding;

    Conv2dLayer(const std::string& name, int64_t in_ch, int64_t out_ch, int64_t kh,
                int64_t kw, int64_t stride, int64_t padding, bool with_bias, Rng& rng);

    Var forward(Tape& t, Var x);
    void collect(std::vector<Parameter*>& out);
};

struct LinearLayer {
    Parameter weight; // [out, in]
    std::optional<Parameter> bias;

    LinearLayer(const std::string& name, int64_t in, int64_t out, bool with_bias, Rng& rng);

    /// x [B, in] -> [B, out]
    Var forward(Tape& t, Var x);
    void collect(std::vector<Parameter*>& out);
};

/// Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor init_uniform(std::vector<int64_t> shape, int64_t fan_in, Rng& rng);

} // namespace can
