#include "eunet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace eunet {

Tensor Tensor::zeros(std::vector<int> d) {
    Tensor t;
    t.dims = std::move(d);
    for (int e : t.dims) require(e > 0, "tensor extents must be positive");
    t.data = std::make_shared<std::vector<double>>(static_cast<size_t>(t.numel()), 0.0);
    return t;
}

Tensor Tensor::full(std::vector<int> d, double v) {
    Tensor t = zeros(std::move(d));
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
}

Tensor Tensor::from(std::vector<int> d, std::vector<double> vals) {
    Tensor t;
    t.dims = std::move(d);
    for (int e : t.dims) require(e > 0, "tensor extents must be positive");
    require(static_cast<int64_t>(vals.size()) == t.numel(),
            "tensor data length does not match dims");
    t.data = std::make_shared<std::vector<double>>(std::move(vals));
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.dims = dims;
    t.data = std::make_shared<std::vector<double>>(*data);
    return t;
}

double Tensor::scalar() const {
    require(numel() == 1, "scalar() on non-scalar tensor");
    return (*data)[0];
}

void ensure_finite(const Tensor& t, const char* op) {
    const double* p = t.ptr();
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i])) {
            throw NonFiniteError(std::string(op) + " produced a non-finite value");
        }
    }
}

double* BackwardCtx::accum(int node, const std::vector<int>& dims) {
    auto& slot = cot[static_cast<size_t>(node)];
    if (!slot.data) slot = Tensor::zeros(dims);
    return slot.ptr();
}

// ---- Tape ----------------------------------------------------------------

Tensor Tape::watch(const Tensor& t) {
    Tensor out = t;  // shares data
    if (!recording_) return out;
    out.node = next_node_++;
    out.requires_grad = true;
    watched_.push_back(out.node);
    node_dims_.push_back(out.dims);
    return out;
}

Tensor Tape::emit(Tensor out, std::vector<int> ins, BackwardFn back) {
    if (!recording_) return out;
    out.node = next_node_++;
    node_dims_.push_back(out.dims);
    for (int in : ins) {
        require(in < out.node, "tape record input created after its output");
    }
    records_.push_back(Record{out.node, std::move(ins), std::move(back)});
    return out;
}

GradMap Tape::backward(const Tensor& loss, const std::vector<int>& also_collect) const {
    require(loss.numel() == 1, "backward requires a scalar loss");
    require(loss.node >= 0, "backward requires a loss produced on this tape");
    std::vector<int> targets = watched_;
    targets.insert(targets.end(), also_collect.begin(), also_collect.end());
    return run_backward(loss.node, Tensor::full({1}, 1.0), targets);
}

GradMap Tape::backward_from(const Tensor& at, const Tensor& seed,
                            const std::vector<int>& targets) const {
    require(at.node >= 0, "backward_from requires an on-tape node");
    require(seed.dims == at.dims, "cotangent seed shape must match the node");
    return run_backward(at.node, seed, targets);
}

GradMap Tape::run_backward(int seed_node, const Tensor& seed,
                           const std::vector<int>& targets) const {
    const size_t n = static_cast<size_t>(next_node_);

    // forward sweep: which nodes can still feed a requested target
    std::vector<char> useful(n, 0);
    for (int t : targets) {
        if (t >= 0 && t < next_node_) useful[static_cast<size_t>(t)] = 1;
    }
    for (const Record& r : records_) {
        if (useful[static_cast<size_t>(r.out)]) continue;
        for (int in : r.ins) {
            if (in >= 0 && useful[static_cast<size_t>(in)]) {
                useful[static_cast<size_t>(r.out)] = 1;
                break;
            }
        }
    }

    BackwardCtx ctx;
    ctx.cot.resize(n);
    ctx.useful = std::move(useful);
    ctx.cot[static_cast<size_t>(seed_node)] = seed.clone();

    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        if (it->out > seed_node) continue;
        const Tensor& g = ctx.cot[static_cast<size_t>(it->out)];
        if (!g.data) continue;                      // no cotangent reached this node
        if (!ctx.useful[static_cast<size_t>(it->out)]) continue;
        it->back(g.ptr(), ctx);
    }

    GradMap grads;
    for (int t : targets) {
        if (t < 0 || t >= next_node_) continue;
        Tensor& g = ctx.cot[static_cast<size_t>(t)];
        if (g.data) grads.emplace(t, std::move(g));
    }
    return grads;
}

// ---- ops -----------------------------------------------------------------

namespace ops {

Tensor add(Tape& tp, const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "add: shape mismatch");
    Tensor y = Tensor::zeros(a.dims);
    const int64_t n = y.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
    ensure_finite(y, "add");
    const int an = a.node, bn = b.node;
    const auto dims = a.dims;
    return tp.emit(std::move(y), {an, bn}, [an, bn, dims](const double* g, BackwardCtx& c) {
        int64_t n = 1;
        for (int e : dims) n *= e;
        if (c.needs(an)) {
            double* ga = c.accum(an, dims);
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (c.needs(bn)) {
            double* gb = c.accum(bn, dims);
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
        }
    });
}

Tensor mul(Tape& tp, const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "mul: shape mismatch");
    Tensor y = Tensor::zeros(a.dims);
    const int64_t n = y.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
    ensure_finite(y, "mul");
    const int an = a.node, bn = b.node;
    const auto dims = a.dims;
    return tp.emit(std::move(y), {an, bn}, [an, bn, dims, a, b](const double* g, BackwardCtx& c) {
        int64_t n = 1;
        for (int e : dims) n *= e;
        if (c.needs(an)) {
            double* ga = c.accum(an, dims);
            const double* bp = b.ptr();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bp[i];
        }
        if (c.needs(bn)) {
            double* gb = c.accum(bn, dims);
            const double* ap = a.ptr();
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * ap[i];
        }
    });
}

Tensor scale(Tape& tp, const Tensor& a, double s) {
    Tensor y = Tensor::zeros(a.dims);
    const int64_t n = y.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = a[i] * s;
    ensure_finite(y, "scale");
    const int an = a.node;
    const auto dims = a.dims;
    return tp.emit(std::move(y), {an}, [an, dims, s](const double* g, BackwardCtx& c) {
        if (!c.needs(an)) return;
        int64_t n = 1;
        for (int e : dims) n *= e;
        double* ga = c.accum(an, dims);
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * s;
    });
}

Tensor relu(Tape& tp, const Tensor& x) {
    Tensor y = Tensor::zeros(x.dims);
    const int64_t n = y.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    ensure_finite(y, "relu");
    const int xn = x.node;
    const auto dims = x.dims;
    return tp.emit(std::move(y), {xn}, [xn, dims, x](const double* g, BackwardCtx& c) {
        if (!c.needs(xn)) return;
        int64_t n = 1;
        for (int e : dims) n *= e;
        double* gx = c.accum(xn, dims);
        const double* xp = x.ptr();
        for (int64_t i = 0; i < n; ++i) {
            if (xp[i] > 0.0) gx[i] += g[i];
        }
    });
}

static double sigmoid_scalar(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

Tensor sigmoid(Tape& tp, const Tensor& x) {
    Tensor y = Tensor::zeros(x.dims);
    const int64_t n = y.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = sigmoid_scalar(x[i]);
    ensure_finite(y, "sigmoid");
    const int xn = x.node;
    const auto dims = x.dims;
    Tensor yc = y;  // shares the output buffer for the backward rule
    return tp.emit(std::move(y), {xn}, [xn, dims, yc](const double* g, BackwardCtx& c) {
        if (!c.needs(xn)) return;
        int64_t n = 1;
        for (int e : dims) n *= e;
        double* gx = c.accum(xn, dims);
        const double* yp = yc.ptr();
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * yp[i] * (1.0 - yp[i]);
    });
}

Tensor sum(Tape& tp, const Tensor& x) {
    double acc = 0.0;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += x[i];
    Tensor y = Tensor::from({1}, {acc});
    ensure_finite(y, "sum");
    const int xn = x.node;
    const auto dims = x.dims;
    return tp.emit(std::move(y), {xn}, [xn, dims](const double* g, BackwardCtx& c) {
        if (!c.needs(xn)) return;
        int64_t n = 1;
        for (int e : dims) n *= e;
        double* gx = c.accum(xn, dims);
        for (int64_t i = 0; i < n; ++i) gx[i] += g[0];
    });
}

// im2col: x[n] -> col[Cin*kh*kw][OH*OW]
static void im2col(const double* x, int C, int H, int W, int kh, int kw,
                   int stride, int pad, int OH, int OW, double* col) {
    for (int ci = 0; ci < C; ++ci) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                double* row = col + ((static_cast<int64_t>(ci) * kh + ki) * kw + kj) * OH * OW;
                for (int oi = 0; oi < OH; ++oi) {
                    const int si = oi * stride + ki - pad;
                    if (si < 0 || si >= H) {
                        std::memset(row + static_cast<int64_t>(oi) * OW, 0,
                                    sizeof(double) * static_cast<size_t>(OW));
                        continue;
                    }
                    const double* src = x + (static_cast<int64_t>(ci) * H + si) * W;
                    for (int oj = 0; oj < OW; ++oj) {
                        const int sj = oj * stride + kj - pad;
                        row[static_cast<int64_t>(oi) * OW + oj] =
                            (sj >= 0 && sj < W) ? src[sj] : 0.0;
                    }
                }
            }
        }
    }
}

// col2im scatter-add, the adjoint of im2col
static void col2im(const double* col, int C, int H, int W, int kh, int kw,
                   int stride, int pad, int OH, int OW, double* x) {
    for (int ci = 0; ci < C; ++ci) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const double* row =
                    col + ((static_cast<int64_t>(ci) * kh + ki) * kw + kj) * OH * OW;
                for (int oi = 0; oi < OH; ++oi) {
                    const int si = oi * stride + ki - pad;
                    if (si < 0 || si >= H) continue;
                    double* dst = x + (static_cast<int64_t>(ci) * H + si) * W;
                    for (int oj = 0; oj < OW; ++oj) {
                        const int sj = oj * stride + kj - pad;
                        if (sj >= 0 && sj < W) dst[sj] += row[static_cast<int64_t>(oi) * OW + oj];
                    }
                }
            }
        }
    }
}

// out[M][N] += A[M][K] * B[K][N]; k is unrolled by 4 to cut output-row traffic
static void gemm_acc(const double* A, const double* B, double* out,
                     int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        double* __restrict orow = out + static_cast<int64_t>(m) * N;
        const double* arow = A + static_cast<int64_t>(m) * K;
        int k = 0;
        for (; k + 4 <= K; k += 4) {
            const double a0 = arow[k], a1 = arow[k + 1], a2 = arow[k + 2], a3 = arow[k + 3];
            const double* b0 = B + static_cast<int64_t>(k) * N;
            const double* b1 = b0 + N;
            const double* b2 = b1 + N;
            const double* b3 = b2 + N;
            for (int n = 0; n < N; ++n) {
                orow[n] += a0 * b0[n] + a1 * b1[n] + a2 * b2[n] + a3 * b3[n];
            }
        }
        for (; k < K; ++k) {
            const double a = arow[k];
            if (a == 0.0) continue;
            const double* brow = B + static_cast<int64_t>(k) * N;
            for (int n = 0; n < N; ++n) orow[n] += a * brow[n];
        }
    }
}

// out[M][K] += A[M][N] * B^T where B is [K][N]; B rows stream once and stay
// hot across the (small) M loop
static void gemm_abt_acc(const double* A, const double* B, double* out,
                         int M, int N, int K) {
    for (int k = 0; k < K; ++k) {
        const double* brow = B + static_cast<int64_t>(k) * N;
        for (int m = 0; m < M; ++m) {
            const double* arow = A + static_cast<int64_t>(m) * N;
            double acc = 0.0;
            for (int n = 0; n < N; ++n) acc += arow[n] * brow[n];
            out[static_cast<int64_t>(m) * K + k] += acc;
        }
    }
}

struct ConvShape {
    int N, Cin, H, W, Cout, kh, kw, OH, OW, stride, pad;
};

static ConvShape conv_shape(const Tensor& x, const Tensor& k, int stride, int pad) {
    require(x.rank() == 4, "conv2d: input must be 4-D [N,Cin,H,W]");
    require(k.rank() == 4, "conv2d: kernel must be 4-D [Cout,Cin,kh,kw]");
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(pad >= 0, "conv2d: pad must be >= 0");
    ConvShape s;
    s.N = x.dim(0); s.Cin = x.dim(1); s.H = x.dim(2); s.W = x.dim(3);
    s.Cout = k.dim(0); s.kh = k.dim(2); s.kw = k.dim(3);
    require(k.dim(1) == s.Cin, "conv2d: kernel Cin does not match input");
    require(s.kh % 2 == 1 && s.kw % 2 == 1, "conv2d: kernel extents must be odd");
    const int eh = s.H + 2 * pad - s.kh;
    const int ew = s.W + 2 * pad - s.kw;
    require(eh >= 0 && ew >= 0, "conv2d: kernel larger than padded input");
    require(eh % stride == 0 && ew % stride == 0,
            "conv2d: output extent is not an integer");
    s.OH = eh / stride + 1;
    s.OW = ew / stride + 1;
    s.stride = stride;
    s.pad = pad;
    return s;
}

// kernel matrix transposed to [Cin*kh*kw][Cout]
static std::vector<double> transpose_kernel(const Tensor& k) {
    const int Cout = k.dim(0);
    const int K = k.dim(1) * k.dim(2) * k.dim(3);
    std::vector<double> kt(static_cast<size_t>(K) * Cout);
    for (int co = 0; co < Cout; ++co) {
        for (int r = 0; r < K; ++r) {
            kt[static_cast<size_t>(r) * Cout + co] = k[static_cast<int64_t>(co) * K + r];
        }
    }
    return kt;
}

// channel-swapped, spatially flipped kernel: [Cin][Cout][kh][kw]
static std::vector<double> flip_swap_kernel(const Tensor& k) {
    const int Cout = k.dim(0), Cin = k.dim(1), kh = k.dim(2), kw = k.dim(3);
    std::vector<double> kt(static_cast<size_t>(k.numel()));
    for (int co = 0; co < Cout; ++co) {
        for (int ci = 0; ci < Cin; ++ci) {
            for (int a = 0; a < kh; ++a) {
                for (int b = 0; b < kw; ++b) {
                    kt[((static_cast<int64_t>(ci) * Cout + co) * kh + a) * kw + b] =
                        k[((static_cast<int64_t>(co) * Cin + ci) * kh + (kh - 1 - a)) * kw +
                          (kw - 1 - b)];
                }
            }
        }
    }
    return kt;
}

Tensor conv2d(Tape& tp, const Tensor& x, const Tensor& k, int stride, int pad) {
    const ConvShape s = conv_shape(x, k, stride, pad);
    Tensor y = Tensor::zeros({s.N, s.Cout, s.OH, s.OW});
    const int64_t ohw = static_cast<int64_t>(s.OH) * s.OW;
    const int64_t plane_in = static_cast<int64_t>(s.Cin) * s.H * s.W;
    const bool unit = (s.kh == 1 && s.kw == 1 && stride == 1 && pad == 0);
    const int K = s.Cin * s.kh * s.kw;

    std::vector<double> col;
    if (!unit) col.resize(static_cast<size_t>(K) * ohw);
    for (int n = 0; n < s.N; ++n) {
        const double* xn = x.ptr() + n * plane_in;
        const double* B = xn;
        if (!unit) {
            im2col(xn, s.Cin, s.H, s.W, s.kh, s.kw, stride, pad, s.OH, s.OW, col.data());
            B = col.data();
        }
        gemm_acc(k.ptr(), B, y.ptr() + static_cast<int64_t>(n) * s.Cout * ohw,
                 s.Cout, K, static_cast<int>(ohw));
    }
    ensure_finite(y, "conv2d");

    const int xn_id = x.node, kn_id = k.node;
    return tp.emit(std::move(y), {xn_id, kn_id},
                   [xn_id, kn_id, x, k, s](const double* g, BackwardCtx& c) {
        const int64_t ohw = static_cast<int64_t>(s.OH) * s.OW;
        const int64_t hw = static_cast<int64_t>(s.H) * s.W;
        const int64_t plane_in = static_cast<int64_t>(s.Cin) * s.H * s.W;
        const bool unit = (s.kh == 1 && s.kw == 1 && s.stride == 1 && s.pad == 0);
        const int K = s.Cin * s.kh * s.kw;
        const bool need_x = c.needs(xn_id);
        const bool need_k = c.needs(kn_id);
        if (!need_x && !need_k) return;

        double* gx = need_x ? c.accum(xn_id, x.dims) : nullptr;
        double* gk = need_k ? c.accum(kn_id, k.dims) : nullptr;

        std::vector<double> col;
        if (!unit && need_k) col.resize(static_cast<size_t>(K) * ohw);

        // gx as a convolution of gout with the flipped, channel-swapped
        // kernel (exact for stride 1); strided convs fall back to col2im
        const bool via_conv = s.stride == 1 && s.kh == s.kw && s.kh - 1 - s.pad >= 0;
        std::vector<double> kflip, kt, gcol, colg;
        if (need_x) {
            if (unit) {
                kt = transpose_kernel(k);
            } else if (via_conv) {
                kflip = flip_swap_kernel(k);
                gcol.resize(static_cast<size_t>(s.Cout) * s.kh * s.kw * hw);
            } else {
                kt = transpose_kernel(k);
                colg.resize(static_cast<size_t>(K) * ohw);
            }
        }

        for (int n = 0; n < s.N; ++n) {
            const double* gn = g + static_cast<int64_t>(n) * s.Cout * ohw;
            const double* xn = x.ptr() + n * plane_in;
            if (need_k) {
                const double* B = xn;
                if (!unit) {
                    im2col(xn, s.Cin, s.H, s.W, s.kh, s.kw, s.stride, s.pad,
                           s.OH, s.OW, col.data());
                    B = col.data();
                }
                // gK += gout * col^T
                gemm_abt_acc(gn, B, gk, s.Cout, static_cast<int>(ohw), K);
            }
            if (need_x) {
                if (unit) {
                    gemm_acc(kt.data(), gn, gx + n * plane_in, s.Cin, s.Cout,
                             static_cast<int>(ohw));
                } else if (via_conv) {
                    im2col(gn, s.Cout, s.OH, s.OW, s.kh, s.kw, 1, s.kh - 1 - s.pad,
                           s.H, s.W, gcol.data());
                    gemm_acc(kflip.data(), gcol.data(), gx + n * plane_in,
                             s.Cin, s.Cout * s.kh * s.kw, static_cast<int>(hw));
                } else {
                    std::fill(colg.begin(), colg.end(), 0.0);
                    gemm_acc(kt.data(), gn, colg.data(), K, s.Cout,
                             static_cast<int>(ohw));
                    col2im(colg.data(), s.Cin, s.H, s.W, s.kh, s.kw, s.stride,
                           s.pad, s.OH, s.OW, gx + n * plane_in);
                }
            }
        }
    });
}

Tensor add_bias(Tape& tp, const Tensor& x, const Tensor& b) {
    require(x.rank() == 4, "add_bias: input must be 4-D");
    require(b.rank() == 1 && b.dim(0) == x.dim(1), "add_bias: bias must be [C]");
    Tensor y = Tensor::zeros(x.dims);
    const int N = x.dim(0), C = x.dim(1);
    const int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double bv = b[c];
            const double* xp = x.ptr() + (static_cast<int64_t>(n) * C + c) * hw;
            double* yp = y.ptr() + (static_cast<int64_t>(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) yp[i] = xp[i] + bv;
        }
    }
    ensure_finite(y, "add_bias");
    const int xn = x.node, bn = b.node;
    const auto xdims = x.dims;
    const auto bdims = b.dims;
    return tp.emit(std::move(y), {xn, bn},
                   [xn, bn, xdims, bdims](const double* g, BackwardCtx& c) {
        const int N = xdims[0], C = xdims[1];
        const int64_t hw = static_cast<int64_t>(xdims[2]) * xdims[3];
        if (c.needs(xn)) {
            double* gx = c.accum(xn, xdims);
            const int64_t n = static_cast<int64_t>(N) * C * hw;
            for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
        }
        if (c.needs(bn)) {
            double* gb = c.accum(bn, bdims);
            for (int n = 0; n < N; ++n) {
                for (int ch = 0; ch < C; ++ch) {
                    const double* gp = g + (static_cast<int64_t>(n) * C + ch) * hw;
                    double acc = 0.0;
                    for (int64_t i = 0; i < hw; ++i) acc += gp[i];
                    gb[ch] += acc;
                }
            }
        }
    });
}

Tensor maxpool2(Tape& tp, const Tensor& x) {
    require(x.rank() == 4, "maxpool2: input must be 4-D");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(H % 2 == 0 && W % 2 == 0, "maxpool2: spatial dims must be even");
    const int OH = H / 2, OW = W / 2;
    Tensor y = Tensor::zeros({N, C, OH, OW});
    auto arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(y.numel()));
    int64_t o = 0;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double* xp = x.ptr() + (static_cast<int64_t>(n) * C + c) * H * W;
            for (int oi = 0; oi < OH; ++oi) {
                for (int oj = 0; oj < OW; ++oj, ++o) {
                    int64_t best = static_cast<int64_t>(2 * oi) * W + 2 * oj;
                    double bv = xp[best];
                    const int64_t cand[3] = {best + 1, best + W, best + W + 1};
                    for (int64_t idx : cand) {
                        if (xp[idx] > bv) { bv = xp[idx]; best = idx; }
                    }
                    y[o] = bv;
                    (*arg)[static_cast<size_t>(o)] =
                        (static_cast<int64_t>(n) * C + c) * H * W + best;
                }
            }
        }
    }
    ensure_finite(y, "maxpool2");
    const int xn = x.node;
    const auto xdims = x.dims;
    const int64_t on = y.numel();
    return tp.emit(std::move(y), {xn}, [xn, xdims, arg, on](const double* g, BackwardCtx& c) {
        if (!c.needs(xn)) return;
        double* gx = c.accum(xn, xdims);
        for (int64_t i = 0; i < on; ++i) gx[(*arg)[static_cast<size_t>(i)]] += g[i];
    });
}

Tensor upsample_nearest(Tape& tp, const Tensor& x, int factor) {
    require(x.rank() == 4, "upsample_nearest: input must be 4-D");
    require(factor >= 1, "upsample_nearest: factor must be >= 1");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OH = H * factor, OW = W * factor;
    Tensor y = Tensor::zeros({N, C, OH, OW});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double* xp = x.ptr() + (static_cast<int64_t>(n) * C + c) * H * W;
            double* yp = y.ptr() + (static_cast<int64_t>(n) * C + c) * OH * OW;
            for (int oi = 0; oi < OH; ++oi) {
                const double* src = xp + static_cast<int64_t>(oi / factor) * W;
                double* dst = yp + static_cast<int64_t>(oi) * OW;
                for (int oj = 0; oj < OW; ++oj) dst[oj] = src[oj / factor];
            }
        }
    }
    ensure_finite(y, "upsample_nearest");
    const int xn = x.node;
    const auto xdims = x.dims;
    return tp.emit(std::move(y), {xn}, [xn, xdims, factor](const double* g, BackwardCtx& c) {
        if (!c.needs(xn)) return;
        const int N = xdims[0], C = xdims[1], H = xdims[2], W = xdims[3];
        const int OH = H * factor, OW = W * factor;
        double* gx = c.accum(xn, xdims);
        for (int n = 0; n < N; ++n) {
            for (int ch = 0; ch < C; ++ch) {
                double* gp = gx + (static_cast<int64_t>(n) * C + ch) * H * W;
                const double* gy = g + (static_cast<int64_t>(n) * C + ch) * OH * OW;
                for (int oi = 0; oi < OH; ++oi) {
                    double* dst = gp + static_cast<int64_t>(oi / factor) * W;
                    const double* src = gy + static_cast<int64_t>(oi) * OW;
                    for (int oj = 0; oj < OW; ++oj) dst[oj / factor] += src[oj];
                }
            }
        }
    });
}

Tensor concat_channels(Tape& tp, const std::vector<Tensor>& xs) {
    require(!xs.empty(), "concat_channels: empty input list");
    const int N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
    int C = 0;
    for (const Tensor& x : xs) {
        require(x.rank() == 4, "concat_channels: inputs must be 4-D");
        require(x.dim(0) == N && x.dim(2) == H && x.dim(3) == W,
                "concat_channels: batch/spatial mismatch");
        C += x.dim(1);
    }
    Tensor y = Tensor::zeros({N, C, H, W});
    const int64_t hw = static_cast<int64_t>(H) * W;
    std::vector<int> offs;
    int off = 0;
    for (const Tensor& x : xs) {
        offs.push_back(off);
        const int ci = x.dim(1);
        for (int n = 0; n < N; ++n) {
            std::memcpy(y.ptr() + (static_cast<int64_t>(n) * C + off) * hw,
                        x.ptr() + static_cast<int64_t>(n) * ci * hw,
                        sizeof(double) * static_cast<size_t>(ci * hw));
        }
        off += ci;
    }
    ensure_finite(y, "concat_channels");
    std::vector<int> in_nodes, in_chans;
    for (const Tensor& x : xs) {
        in_nodes.push_back(x.node);
        in_chans.push_back(x.dim(1));
    }
    return tp.emit(std::move(y), in_nodes,
                   [in_nodes, in_chans, offs, N, C, H, W](const double* g, BackwardCtx& c) {
        const int64_t hw = static_cast<int64_t>(H) * W;
        for (size_t i = 0; i < in_nodes.size(); ++i) {
            if (!c.needs(in_nodes[i])) continue;
            const int ci = in_chans[i];
            double* gx = c.accum(in_nodes[i], {N, ci, H, W});
            for (int n = 0; n < N; ++n) {
                const double* src = g + (static_cast<int64_t>(n) * C + offs[i]) * hw;
                double* dst = gx + static_cast<int64_t>(n) * ci * hw;
                for (int64_t e = 0; e < ci * hw; ++e) dst[e] += src[e];
            }
        }
    });
}

Tensor channel_mean(Tape& tp, const Tensor& x) {
    require(x.rank() == 4, "channel_mean: input must be 4-D");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor y = Tensor::zeros({N, 1, H, W});
    const int64_t hw = static_cast<int64_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        double* yp = y.ptr() + n * hw;
        for (int c = 0; c < C; ++c) {
            const double* xp = x.ptr() + (static_cast<int64_t>(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) yp[i] += xp[i];
        }
        for (int64_t i = 0; i < hw; ++i) yp[i] /= C;
    }
    ensure_finite(y, "channel_mean");
    const int xn = x.node;
    const auto xdims = x.dims;
    return tp.emit(std::move(y), {xn}, [xn, xdims](const double* g, BackwardCtx& c) {
        if (!c.needs(xn)) return;
        const int N = xdims[0], C = xdims[1];
        const int64_t hw = static_cast<int64_t>(xdims[2]) * xdims[3];
        double* gx = c.accum(xn, xdims);
        for (int n = 0; n < N; ++n) {
            const double* gp = g + n * hw;
            for (int ch = 0; ch < C; ++ch) {
                double* dst = gx + (static_cast<int64_t>(n) * C + ch) * hw;
                for (int64_t i = 0; i < hw; ++i) dst[i] += gp[i] / C;
            }
        }
    });
}

Tensor add_broadcast1(Tape& tp, const Tensor& x, const Tensor& m) {
    require(x.rank() == 4 && m.rank() == 4, "add_broadcast1: inputs must be 4-D");
    require(m.dim(1) == 1, "add_broadcast1: second input must have one channel");
    require(x.dim(0) == m.dim(0) && x.dim(2) == m.dim(2) && x.dim(3) == m.dim(3),
            "add_broadcast1: batch/spatial mismatch");
    const int N = x.dim(0), C = x.dim(1);
    const int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
    Tensor y = Tensor::zeros(x.dims);
    for (int n = 0; n < N; ++n) {
        const double* mp = m.ptr() + n * hw;
        for (int c = 0; c < C; ++c) {
            const double* xp = x.ptr() + (static_cast<int64_t>(n) * C + c) * hw;
            double* yp = y.ptr() + (static_cast<int64_t>(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) yp[i] = xp[i] + mp[i];
        }
    }
    ensure_finite(y, "add_broadcast1");
    const int xn = x.node, mn = m.node;
    const auto xdims = x.dims;
    const auto mdims = m.dims;
    return tp.emit(std::move(y), {xn, mn},
                   [xn, mn, xdims, mdims](const double* g, BackwardCtx& c) {
        const int N = xdims[0], C = xdims[1];
        const int64_t hw = static_cast<int64_t>(xdims[2]) * xdims[3];
        if (c.needs(xn)) {
            double* gx = c.accum(xn, xdims);
            const int64_t n = static_cast<int64_t>(N) * C * hw;
            for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
        }
        if (c.needs(mn)) {
            double* gm = c.accum(mn, mdims);
            for (int n = 0; n < N; ++n) {
                double* dst = gm + n * hw;
                for (int ch = 0; ch < C; ++ch) {
                    const double* gp = g + (static_cast<int64_t>(n) * C + ch) * hw;
                    for (int64_t i = 0; i < hw; ++i) dst[i] += gp[i];
                }
            }
        }
    });
}

Tensor softmax(Tape& tp, const Tensor& logits) {
    require(logits.rank() == 4, "softmax: input must be 4-D [N,K,H,W]");
    const int N = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    const int64_t hw = static_cast<int64_t>(H) * W;
    Tensor y = Tensor::zeros(logits.dims);
    for (int n = 0; n < N; ++n) {
        const double* lp = logits.ptr() + static_cast<int64_t>(n) * K * hw;
        double* yp = y.ptr() + static_cast<int64_t>(n) * K * hw;
        for (int64_t p = 0; p < hw; ++p) {
            double mx = lp[p];
            for (int k = 1; k < K; ++k) mx = std::max(mx, lp[k * hw + p]);
            double z = 0.0;
            for (int k = 0; k < K; ++k) {
                const double e = std::exp(lp[k * hw + p] - mx);
                yp[k * hw + p] = e;
                z += e;
            }
            for (int k = 0; k < K; ++k) yp[k * hw + p] /= z;
        }
    }
    ensure_finite(y, "softmax");
    const int ln = logits.node;
    const auto dims = logits.dims;
    Tensor yc = y;
    return tp.emit(std::move(y), {ln}, [ln, dims, yc](const double* g, BackwardCtx& c) {
        if (!c.needs(ln)) return;
        const int N = dims[0], K = dims[1];
        const int64_t hw = static_cast<int64_t>(dims[2]) * dims[3];
        double* gl = c.accum(ln, dims);
        const double* yp = yc.ptr();
        for (int n = 0; n < N; ++n) {
            const int64_t base = static_cast<int64_t>(n) * K * hw;
            for (int64_t p = 0; p < hw; ++p) {
                double dot = 0.0;
                for (int k = 0; k < K; ++k) {
                    dot += g[base + k * hw + p] * yp[base + k * hw + p];
                }
                for (int k = 0; k < K; ++k) {
                    const int64_t i = base + k * hw + p;
                    gl[i] += yp[i] * (g[i] - dot);
                }
            }
        }
    });
}

Tensor softmax_ce(Tape& tp, const Tensor& logits, const Tensor& target) {
    require(logits.rank() == 4, "softmax_ce: logits must be 4-D [N,K,H,W]");
    require(target.rank() == 3, "softmax_ce: target must be 3-D [N,H,W]");
    const int N = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    require(target.dim(0) == N && target.dim(1) == H && target.dim(2) == W,
            "softmax_ce: target shape mismatch");
    const int64_t hw = static_cast<int64_t>(H) * W;
    const int64_t npix = static_cast<int64_t>(N) * hw;

    // cache per-pixel softmax for the backward rule
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(logits.numel()));
    auto tgt = std::make_shared<std::vector<int>>(static_cast<size_t>(npix));
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
        const double* lp = logits.ptr() + static_cast<int64_t>(n) * K * hw;
        double* pp = probs->data() + static_cast<int64_t>(n) * K * hw;
        const double* tp_ = target.ptr() + static_cast<int64_t>(n) * hw;
        for (int64_t p = 0; p < hw; ++p) {
            const double tv = tp_[p];
            const int t = static_cast<int>(tv);
            require(tv == static_cast<double>(t) && t >= 0 && t < K,
                    "softmax_ce: target class id out of range");
            (*tgt)[static_cast<size_t>(n * hw + p)] = t;
            double mx = lp[p];
            for (int k = 1; k < K; ++k) mx = std::max(mx, lp[k * hw + p]);
            double z = 0.0;
            for (int k = 0; k < K; ++k) z += std::exp(lp[k * hw + p] - mx);
            const double logz = std::log(z) + mx;
            loss += logz - lp[t * hw + p];
            for (int k = 0; k < K; ++k) {
                pp[k * hw + p] = std::exp(lp[k * hw + p] - logz);
            }
        }
    }
    Tensor y = Tensor::from({1}, {loss / static_cast<double>(npix)});
    ensure_finite(y, "softmax_ce");
    const int ln = logits.node;
    const auto dims = logits.dims;
    return tp.emit(std::move(y), {ln}, [ln, dims, probs, tgt](const double* g, BackwardCtx& c) {
        if (!c.needs(ln)) return;
        const int N = dims[0], K = dims[1];
        const int64_t hw = static_cast<int64_t>(dims[2]) * dims[3];
        const int64_t npix = static_cast<int64_t>(N) * hw;
        const double scale = g[0] / static_cast<double>(npix);
        double* gl = c.accum(ln, dims);
        for (int n = 0; n < N; ++n) {
            const int64_t base = static_cast<int64_t>(n) * K * hw;
            for (int64_t p = 0; p < hw; ++p) {
                const int t = (*tgt)[static_cast<size_t>(n * hw + p)];
                for (int k = 0; k < K; ++k) {
                    const double onehot = (k == t) ? 1.0 : 0.0;
                    gl[base + k * hw + p] +=
                        scale * ((*probs)[static_cast<size_t>(base + k * hw + p)] - onehot);
                }
            }
        }
    });
}

Tensor dice_loss(Tape& tp, const Tensor& probs, const Tensor& target_onehot,
                 double smooth) {
    require(probs.rank() == 4, "dice_loss: probs must be 4-D [N,K,H,W]");
    require(probs.same_shape(target_onehot), "dice_loss: target shape mismatch");
    const int N = probs.dim(0), K = probs.dim(1);
    const int64_t hw = static_cast<int64_t>(probs.dim(2)) * probs.dim(3);
    const int64_t np = probs.numel();
    for (int64_t i = 0; i < np; ++i) {
        require(probs[i] >= -1e-9 && probs[i] <= 1.0 + 1e-9,
                "dice_loss: probs must lie in [0,1]");
    }
    auto nums = std::make_shared<std::vector<double>>(static_cast<size_t>(N) * K);
    auto dens = std::make_shared<std::vector<double>>(static_cast<size_t>(N) * K);
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
        for (int k = 0; k < K; ++k) {
            const double* pp = probs.ptr() + (static_cast<int64_t>(n) * K + k) * hw;
            const double* tt = target_onehot.ptr() + (static_cast<int64_t>(n) * K + k) * hw;
            double inter = 0.0, psum = 0.0, tsum = 0.0;
            for (int64_t i = 0; i < hw; ++i) {
                inter += pp[i] * tt[i];
                psum += pp[i];
                tsum += tt[i];
            }
            const double num = 2.0 * inter + smooth;
            const double den = psum + tsum + smooth;
            (*nums)[static_cast<size_t>(n * K + k)] = num;
            (*dens)[static_cast<size_t>(n * K + k)] = den;
            loss += 1.0 - num / den;
        }
    }
    Tensor y = Tensor::from({1}, {loss / static_cast<double>(N * K)});
    ensure_finite(y, "dice_loss");
    const int pn = probs.node;
    const auto dims = probs.dims;
    return tp.emit(std::move(y), {pn},
                   [pn, dims, target_onehot, nums, dens](const double* g, BackwardCtx& c) {
        if (!c.needs(pn)) return;
        const int N = dims[0], K = dims[1];
        const int64_t hw = static_cast<int64_t>(dims[2]) * dims[3];
        const double scale = g[0] / static_cast<double>(N * K);
        double* gp = c.accum(pn, dims);
        for (int n = 0; n < N; ++n) {
            for (int k = 0; k < K; ++k) {
                const double num = (*nums)[static_cast<size_t>(n * K + k)];
                const double den = (*dens)[static_cast<size_t>(n * K + k)];
                const double* tt =
                    target_onehot.ptr() + (static_cast<int64_t>(n) * K + k) * hw;
                double* dst = gp + (static_cast<int64_t>(n) * K + k) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    // d(1 - num/den)/dp = -(2*t*den - num) / den^2
                    dst[i] += scale * (num - 2.0 * tt[i] * den) / (den * den);
                }
            }
        }
    });
}

Tensor slice_pixel(Tape& tp, const Tensor& x, int i, int j) {
    require(x.rank() == 4, "slice_pixel: input must be 4-D");
    const int N = x.dim(0), K = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(i >= 0 && i < H && j >= 0 && j < W, "slice_pixel: position out of range");
    Tensor y = Tensor::zeros({N, K, 1, 1});
    const int64_t hw = static_cast<int64_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        for (int k = 0; k < K; ++k) {
            y[static_cast<int64_t>(n) * K + k] =
                x[(static_cast<int64_t>(n) * K + k) * hw + static_cast<int64_t>(i) * W + j];
        }
    }
    ensure_finite(y, "slice_pixel");
    const int xn = x.node;
    const auto xdims = x.dims;
    return tp.emit(std::move(y), {xn}, [xn, xdims, i, j](const double* g, BackwardCtx& c) {
        if (!c.needs(xn)) return;
        const int N = xdims[0], K = xdims[1], H = xdims[2], W = xdims[3];
        const int64_t hw = static_cast<int64_t>(H) * W;
        double* gx = c.accum(xn, xdims);
        for (int n = 0; n < N; ++n) {
            for (int k = 0; k < K; ++k) {
                gx[(static_cast<int64_t>(n) * K + k) * hw + static_cast<int64_t>(i) * W + j] +=
                    g[static_cast<int64_t>(n) * K + k];
            }
        }
    });
}

} // namespace ops

double finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                         const Tensor& x, double eps) {
    require(eps > 0.0, "finite_diff_check: eps must be positive");

    Tape tape;
    Tensor xw = tape.watch(x);
    Tensor loss = f(tape, xw);
    require(loss.numel() == 1, "finite_diff_check: f must be scalar-valued");
    GradMap grads = tape.backward(loss);
    auto it = grads.find(xw.node);
    Tensor analytic = (it != grads.end()) ? it->second : Tensor::zeros(x.dims);

    auto eval = [&](const Tensor& xi) {
        Tape t(false);
        return f(t, xi).scalar();
    };

    double worst = 0.0;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        Tensor xp = x.clone();
        Tensor xm = x.clone();
        xp[i] += eps;
        xm[i] -= eps;
        const double central = (eval(xp) - eval(xm)) / (2.0 * eps);
        const double a = analytic[i];
        const double err = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace eunet
