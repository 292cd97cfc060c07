// SPDX-License-Identifier: Apache-2.0

#include "nn.hpp"

#include <cmath>
#include <cstring>

namespace can {

PoolGeometry adaptive_pool_params(int64_t input_size, int64_t output_size) {
    require(output_size >= 1, ErrorKind::invalid_argument,
            "adaptive pooling: output size must be >= 1");
    require(output_size <= input_size, ErrorKind::invalid_argument,
            "adaptive pooling: output size " + std::to_string(output_size) +
                " exceeds input size " + std::to_string(input_size));
    PoolGeometry g{};
    g.input_size = input_size;
    g.output_size = output_size;
    g.padding = 0;
    g.stride = input_size / output_size;
    g.kernel = input_size - (output_size - 1) * g.stride;
    return g;
}

namespace {

struct ConvDims {
    int64_t batch, cin, h, w;     // input (batch == 1 for 3-D tensors)
    int64_t cout, kh, kw;         // weight
    int64_t ho, wo;               // output
    bool batched;                 // input had an explicit batch axis
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int64_t stride, int64_t padding) {
    require(x.ndim() == 3 || x.ndim() == 4, ErrorKind::invalid_argument,
            "conv2d: input must be [C,H,W] or [B,C,H,W], got " + x.shape_str());
    require(w.ndim() == 4, ErrorKind::invalid_argument,
            "conv2d: weight must be [out,in,kh,kw], got " + w.shape_str());
    require(stride >= 1, ErrorKind::invalid_argument, "conv2d: stride must be >= 1");
    require(padding >= 0, ErrorKind::invalid_argument, "conv2d: padding must be >= 0");
    ConvDims d{};
    d.batched = x.ndim() == 4;
    d.batch = d.batched ? x.dim(0) : 1;
    d.cin = x.dim(d.batched ? 1 : 0);
    d.h = x.dim(d.batched ? 2 : 1);
    d.w = x.dim(d.batched ? 3 : 2);
    d.cout = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    require(w.dim(1) == d.cin, ErrorKind::invalid_argument,
            "conv2d: input has " + std::to_string(d.cin) + " channels, weight expects " +
                std::to_string(w.dim(1)));
    d.ho = (d.h + 2 * padding - d.kh) / stride + 1;
    d.wo = (d.w + 2 * padding - d.kw) / stride + 1;
    require(d.h + 2 * padding >= d.kh && d.w + 2 * padding >= d.kw && d.ho >= 1 && d.wo >= 1,
            ErrorKind::invalid_argument, "conv2d: kernel does not fit, output would be empty");
    return d;
}

// C[m x n] (+)= A[m x k] @ B[k x n]; row-partitioned so results are
// independent of the thread count.
void gemm_acc(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c,
              bool accumulate) {
    if (!accumulate) {
        std::memset(c, 0, static_cast<size_t>(m * n) * sizeof(double));
    }
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
    for (int64_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C[m x n] (+)= A[k x m]^T @ B[k x n]
void gemm_tn_acc(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c,
                 bool accumulate) {
    if (!accumulate) {
        std::memset(c, 0, static_cast<size_t>(m * n) * sizeof(double));
    }
    for (int64_t kk = 0; kk < k; ++kk) {
        const double* arow = a + kk * m;
        const double* brow = b + kk * n;
        for (int64_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C[m x n] (+)= A[m x k] @ B[n x k]^T
void gemm_nt_acc(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c,
                 bool accumulate) {
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) {
                acc += arow[kk] * brow[kk];
            }
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

// Patch matrix for one image: col[cin*kh*kw][ho*wo], zero-padded borders.
void im2col(const double* img, const ConvDims& d, int64_t stride, int64_t padding,
            double* col) {
    const int64_t cols = d.ho * d.wo;
    for (int64_t ci = 0; ci < d.cin; ++ci) {
        const double* plane = img + ci * d.h * d.w;
        for (int64_t ky = 0; ky < d.kh; ++ky) {
            for (int64_t kx = 0; kx < d.kw; ++kx) {
                double* crow = col + ((ci * d.kh + ky) * d.kw + kx) * cols;
                for (int64_t oy = 0; oy < d.ho; ++oy) {
                    const int64_t iy = oy * stride + ky - padding;
                    if (iy < 0 || iy >= d.h) {
                        std::memset(crow + oy * d.wo, 0,
                                    static_cast<size_t>(d.wo) * sizeof(double));
                        continue;
                    }
                    const double* irow = plane + iy * d.w;
                    for (int64_t ox = 0; ox < d.wo; ++ox) {
                        const int64_t ix = ox * stride + kx - padding;
                        crow[oy * d.wo + ox] = (ix < 0 || ix >= d.w) ? 0.0 : irow[ix];
                    }
                }
            }
        }
    }
}

// Scatter-add of a patch-matrix gradient back into image space.
void col2im_acc(const double* col, const ConvDims& d, int64_t stride, int64_t padding,
                double* img) {
    const int64_t cols = d.ho * d.wo;
    for (int64_t ci = 0; ci < d.cin; ++ci) {
        double* plane = img + ci * d.h * d.w;
        for (int64_t ky = 0; ky < d.kh; ++ky) {
            for (int64_t kx = 0; kx < d.kw; ++kx) {
                const double* crow = col + ((ci * d.kh + ky) * d.kw + kx) * cols;
                for (int64_t oy = 0; oy < d.ho; ++oy) {
                    const int64_t iy = oy * stride + ky - padding;
                    if (iy < 0 || iy >= d.h) {
                        continue;
                    }
                    double* irow = plane + iy * d.w;
                    for (int64_t ox = 0; ox < d.wo; ++ox) {
                        const int64_t ix = ox * stride + kx - padding;
                        if (ix >= 0 && ix < d.w) {
                            irow[ix] += crow[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* bias, int64_t stride,
                      int64_t padding, const ConvDims& d) {
    std::vector<int64_t> out_shape = d.batched
                                         ? std::vector<int64_t>{d.batch, d.cout, d.ho, d.wo}
                                         : std::vector<int64_t>{d.cout, d.ho, d.wo};
    Tensor out(std::move(out_shape));
    const int64_t patch = d.cin * d.kh * d.kw;
    const int64_t cols = d.ho * d.wo;
    // images are independent; each thread writes only its own output slice
#pragma omp parallel for schedule(static) if (d.batch > 1)
    for (int64_t b = 0; b < d.batch; ++b) {
        std::vector<double> col(static_cast<size_t>(patch * cols));
        const double* img = x.data().data() + b * d.cin * d.h * d.w;
        double* o = out.data().data() + b * d.cout * cols;
        im2col(img, d, stride, padding, col.data());
        gemm_acc(d.cout, cols, patch, w.data().data(), col.data(), o, false);
        if (bias != nullptr) {
            for (int64_t c = 0; c < d.cout; ++c) {
                const double bv = (*bias)[c];
                double* orow = o + c * cols;
                for (int64_t i = 0; i < cols; ++i) {
                    orow[i] += bv;
                }
            }
        }
    }
    return out;
}

} // namespace

Var conv2d(Tape& t, Var x, Var weight, std::optional<Var> bias, int64_t stride,
           int64_t padding) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(weight);
    const ConvDims d = conv_dims(xv, wv, stride, padding);
    const Tensor* bv = nullptr;
    if (bias) {
        require(t.value(*bias).ndim() == 1 && t.value(*bias).dim(0) == d.cout,
                ErrorKind::invalid_argument, "conv2d: bias must be [out_channels]");
        bv = &t.value(*bias);
    }
    Tensor out = conv2d_forward(xv, wv, bv, stride, padding, d);

    std::vector<Var> inputs{x, weight};
    if (bias) {
        inputs.push_back(*bias);
    }
    return t.make_node(std::move(out), inputs, [x, weight, bias, stride, padding,
                                                d](Tape& tape, const Tensor& g) {
        const Tensor& xv2 = tape.value(x);
        const Tensor& wv2 = tape.value(weight);
        const int64_t patch = d.cin * d.kh * d.kw;
        const int64_t cols = d.ho * d.wo;

        const bool need_x = tape.requires_grad(x);
        const bool need_w = tape.requires_grad(weight);
        Tensor gx = need_x ? Tensor::zeros(xv2.shape()) : Tensor();
        Tensor gw = need_w ? Tensor::zeros(wv2.shape()) : Tensor();
        // per-image weight-gradient slabs, reduced serially in image order so
        // the result does not depend on the thread count
        std::vector<double> gw_slabs(
            need_w ? static_cast<size_t>(d.batch * d.cout * patch) : 0);
#pragma omp parallel for schedule(static) if (d.batch > 1)
        for (int64_t b = 0; b < d.batch; ++b) {
            const double* go = g.data().data() + b * d.cout * cols;
            if (need_w) {
                std::vector<double> col(static_cast<size_t>(patch * cols));
                im2col(xv2.data().data() + b * d.cin * d.h * d.w, d, stride, padding,
                       col.data());
                // gw_b[cout x patch] = gout[cout x cols] @ col[patch x cols]^T
                gemm_nt_acc(d.cout, patch, cols, go, col.data(),
                            gw_slabs.data() + b * d.cout * patch, false);
            }
            if (need_x) {
                std::vector<double> colg(static_cast<size_t>(patch * cols));
                // colg[patch x cols] = w[cout x patch]^T @ gout[cout x cols]
                gemm_tn_acc(patch, cols, d.cout, wv2.data().data(), go, colg.data(), false);
                col2im_acc(colg.data(), d, stride, padding,
                           gx.data().data() + b * d.cin * d.h * d.w);
            }
        }
        if (need_x) {
            tape.accumulate(x, std::move(gx));
        }
        if (need_w) {
            for (int64_t b = 0; b < d.batch; ++b) {
                const double* slab = gw_slabs.data() + b * d.cout * patch;
                for (int64_t i = 0; i < d.cout * patch; ++i) {
                    gw[i] += slab[i];
                }
            }
            tape.accumulate(weight, std::move(gw));
        }
        if (bias && tape.requires_grad(*bias)) {
            Tensor gb = Tensor::zeros({d.cout});
            for (int64_t b = 0; b < d.batch; ++b) {
                const double* go = g.data().data() + b * d.cout * cols;
                for (int64_t c = 0; c < d.cout; ++c) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < cols; ++i) {
                        acc += go[c * cols + i];
                    }
                    gb[c] += acc;
                }
            }
            tape.accumulate(*bias, std::move(gb));
        }
    });
}

namespace {

struct PoolDims {
    int64_t batch, ch, h, w, oh, ow;
    PoolGeometry gh, gw;
    bool batched;
};

PoolDims pool_dims(const Tensor& x, int64_t out_h, int64_t out_w) {
    require(x.ndim() == 3 || x.ndim() == 4, ErrorKind::invalid_argument,
            "adaptive_pool2d: input must be [C,H,W] or [B,C,H,W], got " + x.shape_str());
    PoolDims d{};
    d.batched = x.ndim() == 4;
    d.batch = d.batched ? x.dim(0) : 1;
    d.ch = x.dim(d.batched ? 1 : 0);
    d.h = x.dim(d.batched ? 2 : 1);
    d.w = x.dim(d.batched ? 3 : 2);
    d.oh = out_h;
    d.ow = out_w;
    d.gh = adaptive_pool_params(d.h, out_h);
    d.gw = adaptive_pool_params(d.w, out_w);
    return d;
}

} // namespace

Var adaptive_pool2d(Tape& t, Var x, int64_t out_h, int64_t out_w, PoolMode mode) {
    const Tensor& xv = t.value(x);
    const PoolDims d = pool_dims(xv, out_h, out_w);
    std::vector<int64_t> out_shape = d.batched
                                         ? std::vector<int64_t>{d.batch, d.ch, d.oh, d.ow}
                                         : std::vector<int64_t>{d.ch, d.oh, d.ow};
    Tensor out(std::move(out_shape));
    const int64_t planes = d.batch * d.ch;
    std::vector<int64_t> argmax;
    if (mode == PoolMode::max) {
        argmax.resize(static_cast<size_t>(planes * d.oh * d.ow));
    }
    const double inv_win = 1.0 / static_cast<double>(d.gh.kernel * d.gw.kernel);
    for (int64_t p = 0; p < planes; ++p) {
        const double* plane = xv.data().data() + p * d.h * d.w;
        double* o = out.data().data() + p * d.oh * d.ow;
        for (int64_t oy = 0; oy < d.oh; ++oy) {
            for (int64_t ox = 0; ox < d.ow; ++ox) {
                const int64_t y0 = oy * d.gh.stride;
                const int64_t x0 = ox * d.gw.stride;
                if (mode == PoolMode::max) {
                    double best = plane[y0 * d.w + x0];
                    int64_t best_i = y0 * d.w + x0;
                    for (int64_t ky = 0; ky < d.gh.kernel; ++ky) {
                        for (int64_t kx = 0; kx < d.gw.kernel; ++kx) {
                            const int64_t idx = (y0 + ky) * d.w + (x0 + kx);
                            if (plane[idx] > best) {
                                best = plane[idx];
                                best_i = idx;
                            }
                        }
                    }
                    o[oy * d.ow + ox] = best;
                    argmax[static_cast<size_t>(p * d.oh * d.ow + oy * d.ow + ox)] = best_i;
                } else {
                    double acc = 0.0;
                    for (int64_t ky = 0; ky < d.gh.kernel; ++ky) {
                        for (int64_t kx = 0; kx < d.gw.kernel; ++kx) {
                            acc += plane[(y0 + ky) * d.w + (x0 + kx)];
                        }
                    }
                    o[oy * d.ow + ox] = acc * inv_win;
                }
            }
        }
    }

    const Var in[] = {x};
    return t.make_node(
        std::move(out), in,
        [x, d, mode, inv_win, argmax = std::move(argmax)](Tape& tape, const Tensor& g) {
            Tensor gx = Tensor::zeros(tape.value(x).shape());
            const int64_t planes = d.batch * d.ch;
            for (int64_t p = 0; p < planes; ++p) {
                const double* go = g.data().data() + p * d.oh * d.ow;
                double* gplane = gx.data().data() + p * d.h * d.w;
                for (int64_t oy = 0; oy < d.oh; ++oy) {
                    for (int64_t ox = 0; ox < d.ow; ++ox) {
                        const double gv = go[oy * d.ow + ox];
                        if (mode == PoolMode::max) {
                            gplane[argmax[static_cast<size_t>(p * d.oh * d.ow + oy * d.ow +
                                                              ox)]] += gv;
                        } else {
                            const int64_t y0 = oy * d.gh.stride;
                            const int64_t x0 = ox * d.gw.stride;
                            for (int64_t ky = 0; ky < d.gh.kernel; ++ky) {
                                for (int64_t kx = 0; kx < d.gw.kernel; ++kx) {
                                    gplane[(y0 + ky) * d.w + (x0 + kx)] += gv * inv_win;
                                }
                            }
                        }
                    }
                }
            }
            tape.accumulate(x, std::move(gx));
        });
}

Var softmax(Tape& t, Var x) {
    Tensor out = ops::softmax(t.value(x));
    const Var in[] = {x};
    const Var self = t.make_node(std::move(out), in, nullptr);
    // g_in = p * (g - <g, p>) per row
    t.set_backprop(self, [x, self](Tape& tape, const Tensor& g) {
        const Tensor& p = tape.value(self);
        const int64_t cols = p.shape().back();
        const int64_t rows = p.numel() / cols;
        Tensor gx(p.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const double* pr = p.data().data() + r * cols;
            const double* gr = g.data().data() + r * cols;
            double dot = 0.0;
            for (int64_t j = 0; j < cols; ++j) {
                dot += gr[j] * pr[j];
            }
            double* gxr = gx.data().data() + r * cols;
            for (int64_t j = 0; j < cols; ++j) {
                gxr[j] = pr[j] * (gr[j] - dot);
            }
        }
        tape.accumulate(x, std::move(gx));
    });
    return self;
}

Var l2_normalize(Tape& t, Var x, double eps) {
    Tensor out = ops::l2_normalize(t.value(x), eps);
    const Var in[] = {x};
    const Var self = t.make_node(std::move(out), in, nullptr);
    t.set_backprop(self, [x, self, eps](Tape& tape, const Tensor& g) {
        const Tensor& xin = tape.value(x);
        const Tensor& y = tape.value(self);
        const int64_t cols = xin.shape().back();
        const int64_t rows = xin.numel() / cols;
        Tensor gx(xin.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const double* xr = xin.data().data() + r * cols;
            const double* yr = y.data().data() + r * cols;
            const double* gr = g.data().data() + r * cols;
            double sq = 0.0;
            for (int64_t j = 0; j < cols; ++j) {
                sq += xr[j] * xr[j];
            }
            const double norm = std::sqrt(sq);
            double* gxr = gx.data().data() + r * cols;
            if (norm > eps) {
                double dot = 0.0;
                for (int64_t j = 0; j < cols; ++j) {
                    dot += gr[j] * yr[j];
                }
                for (int64_t j = 0; j < cols; ++j) {
                    gxr[j] = (gr[j] - yr[j] * dot) / norm;
                }
            } else {
                for (int64_t j = 0; j < cols; ++j) {
                    gxr[j] = gr[j] / eps;
                }
            }
        }
        tape.accumulate(x, std::move(gx));
    });
    return self;
}

Var add_row_bias(Tape& t, Var x, Var bias) {
    const Tensor& xv = t.value(x);
    const Tensor& bv = t.value(bias);
    require(xv.ndim() == 2 && bv.ndim() == 1 && xv.dim(1) == bv.dim(0),
            ErrorKind::invalid_argument, "add_row_bias: need [B,n] and [n]");
    Tensor out(xv.shape());
    const int64_t rows = xv.dim(0), cols = xv.dim(1);
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < cols; ++j) {
            out[r * cols + j] = xv[r * cols + j] + bv[j];
        }
    }
    const Var in[] = {x, bias};
    return t.make_node(std::move(out), in, [x, bias, rows, cols](Tape& tape, const Tensor& g) {
        tape.accumulate(x, g);
        Tensor gb = Tensor::zeros({cols});
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < cols; ++j) {
                gb[j] += g[r * cols + j];
            }
        }
        tape.accumulate(bias, std::move(gb));
    });
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

Tensor init_uniform(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) {
        t[i] = rng.uniform(-bound, bound);
    }
    return t;
}

Conv2dLayer::Conv2dLayer(const std::string& name, int64_t in_ch, int64_t out_ch, int64_t kh,
                         int64_t kw, int64_t stride_, int64_t padding_, bool with_bias,
                         Rng& rng)
    : weight(name + ".weight", init_uniform({out_ch, in_ch, kh, kw}, in_ch * kh * kw, rng)),
      stride(stride_),
      padding(padding_) {
    if (with_bias) {
        bias.emplace(name + ".bias", Tensor::zeros({out_ch}));
    }
}

Var Conv2dLayer::forward(Tape& t, Var x) {
    std::optional<Var> b;
    if (bias) {
        b = t.param(*bias);
    }
    return conv2d(t, x, t.param(weight), b, stride, padding);
}

void Conv2dLayer::collect(std::vector<Parameter*>& out) {
    out.push_back(&weight);
    if (bias) {
        out.push_back(&*bias);
    }
}

LinearLayer::LinearLayer(const std::string& name, int64_t in, int64_t out, bool with_bias,
                         Rng& rng)
    : weight(name + ".weight", init_uniform({out, in}, in, rng)) {
    if (with_bias) {
        bias.emplace(name + ".bias", Tensor::zeros({out}));
    }
}

Var LinearLayer::forward(Tape& t, Var x) {
    Var y = t.matmul_nt(x, t.param(weight));
    if (bias) {
        y = add_row_bias(t, y, t.param(*bias));
    }
    return y;
}

void LinearLayer::collect(std::vector<Parameter*>& out) {
    out.push_back(&weight);
    if (bias) {
        out.push_back(&*bias);
    }
}

} // namespace can
