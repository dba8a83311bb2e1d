#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "eunet/common.hpp"

namespace eunet {

// Dense row-major tensor of 64-bit reals. Data is shared on copy and treated
// as immutable once an op has consumed it; a fresh buffer is allocated for
// every op output. `node` identifies the tensor on the tape that produced it
// (-1 = constant / off-tape).
struct Tensor {
    std::vector<int> dims;
    std::shared_ptr<std::vector<double>> data;
    int node = -1;
    bool requires_grad = false;

    Tensor() = default;

    static Tensor zeros(std::vector<int> d);
    static Tensor full(std::vector<int> d, double v);
    static Tensor from(std::vector<int> d, std::vector<double> vals);

    int64_t numel() const {
        int64_t n = 1;
        for (int e : dims) n *= e;
        return dims.empty() ? 0 : n;
    }
    double* ptr() { return data->data(); }
    const double* ptr() const { return data->data(); }
    double& operator[](int64_t i) { return (*data)[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return (*data)[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }
    int dim(int i) const { return dims[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(dims.size()); }

    // deep copy (fresh buffer, off-tape)
    Tensor clone() const;

    double scalar() const;  // value of a 1-element tensor
};

inline int64_t idx4(int C, int H, int W, int n, int c, int i, int j) {
    return ((static_cast<int64_t>(n) * C + c) * H + i) * W + j;
}

void ensure_finite(const Tensor& t, const char* op);

// node id -> gradient tensor (same shape as the node's value)
using GradMap = std::unordered_map<int, Tensor>;

class Tape;

// Per-backward-pass state. Kept outside the Tape so that many backward
// passes can run concurrently against one read-only tape.
struct BackwardCtx {
    std::vector<Tensor> cot;     // cotangent per node, empty until touched
    std::vector<char> useful;    // node can still reach a wanted target

    bool needs(int node) const {
        return node >= 0 && useful[static_cast<size_t>(node)] != 0;
    }
    // get-or-create the zero-initialized cotangent buffer for `node`
    double* accum(int node, const std::vector<int>& dims);
};

using BackwardFn = std::function<void(const double* gout, BackwardCtx&)>;

// Reverse-mode tape. Records one entry per op output; replaying the records
// in reverse propagates cotangents from any node back to the leaves. The
// tape is append-only during forward and read-only during backward, and is
// confined to one logical thread while recording.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    // register a leaf whose gradient should be reported by backward()
    Tensor watch(const Tensor& t);

    // register an op output; `ins` are the node ids feeding it
    Tensor emit(Tensor out, std::vector<int> ins, BackwardFn back);

    // gradient of a scalar loss w.r.t. every watched ancestor;
    // `also_collect` adds cotangents of arbitrary interior nodes to the map
    GradMap backward(const Tensor& loss, const std::vector<int>& also_collect = {}) const;

    // VJP: seed an arbitrary node with a cotangent and pull gradients for
    // `targets` (watched leaves or interior nodes). Restricting the targets
    // prunes the sweep to the records that can actually reach them.
    GradMap backward_from(const Tensor& at, const Tensor& seed,
                          const std::vector<int>& targets) const;

    int node_count() const { return next_node_; }
    const std::vector<int>& watched_nodes() const { return watched_; }

private:
    struct Record {
        int out;
        std::vector<int> ins;
        BackwardFn back;
    };

    GradMap run_backward(int seed_node, const Tensor& seed,
                         const std::vector<int>& targets) const;

    bool recording_;
    int next_node_ = 0;
    std::vector<Record> records_;
    std::vector<int> watched_;
    std::vector<std::vector<int>> node_dims_;  // dims per node id
};

// ---- differentiable ops ------------------------------------------------

namespace ops {

Tensor add(Tape& tp, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tp, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tp, const Tensor& a, double s);
Tensor relu(Tape& tp, const Tensor& x);
Tensor sigmoid(Tape& tp, const Tensor& x);
Tensor sum(Tape& tp, const Tensor& x);  // -> [1]

// x:[N,Cin,H,W] (*) k:[Cout,Cin,kh,kw], odd kernel, exact output division
Tensor conv2d(Tape& tp, const Tensor& x, const Tensor& k, int stride = 1, int pad = 0);

// y = x + b per channel, b:[C]
Tensor add_bias(Tape& tp, const Tensor& x, const Tensor& b);

// 2x2 max pooling, stride 2; H,W must be even
Tensor maxpool2(Tape& tp, const Tensor& x);

Tensor upsample_nearest(Tape& tp, const Tensor& x, int factor);

// concatenate along the channel axis
Tensor concat_channels(Tape& tp, const std::vector<Tensor>& xs);

// mean over channels -> [N,1,H,W]
Tensor channel_mean(Tape& tp, const Tensor& x);

// x:[N,C,H,W] + m:[N,1,H,W] broadcast over channels
Tensor add_broadcast1(Tape& tp, const Tensor& x, const Tensor& m);

// softmax over the channel axis
Tensor softmax(Tape& tp, const Tensor& logits);

// mean over all pixels of -log softmax(logits)[target]; target:[N,H,W] class ids
Tensor softmax_ce(Tape& tp, const Tensor& logits, const Tensor& target);

// 1 - (2*sum(p*t)+s)/(sum p + sum t + s), averaged over classes and batch
Tensor dice_loss(Tape& tp, const Tensor& probs, const Tensor& target_onehot,
                 double smooth = 1.0);

// logits at one spatial position -> [N,K,1,1]
Tensor slice_pixel(Tape& tp, const Tensor& x, int i, int j);

} // namespace ops

// Max relative error between the tape gradient of f and central differences,
//   max_i |analytic_i - central_i| / (|analytic_i| + |central_i| + 1e-12).
double finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                         const Tensor& x, double eps);

} // namespace eunet
