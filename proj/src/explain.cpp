#include "eunet/explain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "eunet/rng.hpp"

namespace eunet {

std::string to_string(MapKind k) {
    switch (k) {
        case MapKind::cam: return "cam";
        case MapKind::gradcam: return "gradcam";
        case MapKind::confidence: return "confidence";
        case MapKind::uncertainty: return "uncertainty";
        case MapKind::entropy: return "entropy";
        case MapKind::variance: return "variance";
        case MapKind::mean_prob: return "mean_prob";
    }
    return "unknown";
}

double PixelMap::min() const {
    double m = values.empty() ? 0.0 : values[0];
    for (double v : values) m = std::min(m, v);
    return m;
}

double PixelMap::max() const {
    double m = values.empty() ? 0.0 : values[0];
    for (double v : values) m = std::max(m, v);
    return m;
}

PixelMap PixelMap::normalized() const {
    PixelMap out = *this;
    const double lo = min(), hi = max();
    if (hi > lo) {
        for (double& v : out.values) v = (v - lo) / (hi - lo);
    } else {
        std::fill(out.values.begin(), out.values.end(), 0.0);
    }
    return out;
}

SalienceKernel equivalent_kernel(const MhexBlock& block, int stage) {
    require(block.conv1_weight.rank() == 4 && block.conv2_weight.rank() == 4 &&
                block.conv1_weight.dim(2) == 1 && block.conv1_weight.dim(3) == 1 &&
                block.conv2_weight.dim(2) == 1 && block.conv2_weight.dim(3) == 1,
            "equivalent_kernel: block kernels must be 1x1");
    const int Hd = block.conv1_weight.dim(0);
    const int Cin = block.conv1_weight.dim(1);
    const int K = block.conv2_weight.dim(0);
    require(block.conv2_weight.dim(1) == Hd, "equivalent_kernel: hidden width mismatch");

    SalienceKernel sk;
    sk.stage = stage;
    sk.w_equiv = Tensor::zeros({K, Cin, 1, 1});
    for (int c = 0; c < K; ++c) {
        for (int i = 0; i < Cin; ++i) {
            double acc = 0.0;
            for (int j = 0; j < Hd; ++j) {
                acc += block.conv2_weight[static_cast<int64_t>(c) * Hd + j] *
                       block.conv1_weight[static_cast<int64_t>(j) * Cin + i];
            }
            sk.w_equiv[static_cast<int64_t>(c) * Cin + i] = acc;
        }
    }
    return sk;
}

PixelMap mhex_cam(const SalienceKernel& kernel, const Tensor& A, int cls) {
    require(A.rank() == 3, "mhex_cam: A must be [Cin,h,w]");
    const int K = kernel.w_equiv.dim(0);
    const int Cin = kernel.w_equiv.dim(1);
    require(A.dim(0) == Cin, "mhex_cam: channel count mismatch");
    require(cls >= 0 && cls < K, "mhex_cam: class out of range");
    const int h = A.dim(1), w = A.dim(2);
    const int64_t hw = static_cast<int64_t>(h) * w;

    PixelMap m(h, w, MapKind::cam);
    for (int j = 0; j < Cin; ++j) {
        const double wv = kernel.w_equiv[static_cast<int64_t>(cls) * Cin + j];
        const double* ap = A.ptr() + static_cast<int64_t>(j) * hw;
        for (int64_t p = 0; p < hw; ++p) m.values[static_cast<size_t>(p)] += wv * ap[p];
    }
    return m;
}

PixelMap mhex_cam_for_stage(const ModelGraph& model, const Tensor& image, int cls,
                            int stage) {
    require(model.cfg.with_mhex, "mhex_cam_for_stage: model has no MHEX+ blocks");
    require(stage >= 0 && stage < model.decoder_stages(), "mhex_cam_for_stage: bad stage");
    Tape tape(false);
    ForwardTrace trace = forward(model, tape, image);
    const Tensor& X = trace.stage_features[static_cast<size_t>(stage)];
    Tensor A = Tensor::zeros({X.dim(1), X.dim(2), X.dim(3)});
    for (int64_t i = 0; i < A.numel(); ++i) A[i] = X[i];
    SalienceKernel sk = equivalent_kernel(model.mhex[static_cast<size_t>(stage)], stage);
    return mhex_cam(sk, A, cls);
}

namespace {

PixelMap upsample_map(const PixelMap& m, int factor, MapKind kind) {
    if (factor == 1) {
        PixelMap out = m;
        out.kind = kind;
        return out;
    }
    PixelMap out(m.height * factor, m.width * factor, kind);
    for (int i = 0; i < out.height; ++i) {
        for (int j = 0; j < out.width; ++j) {
            out.at(i, j) = m.at(i / factor, j / factor);
        }
    }
    return out;
}

} // namespace

PixelMap multi_stage_cam(const ModelGraph& model, const Tensor& image, int cls) {
    require(model.cfg.with_mhex, "multi_stage_cam: model has no MHEX+ blocks");
    const int L = model.decoder_stages();
    Tape tape(false);
    ForwardTrace trace = forward(model, tape, image);
    const int H = trace.final_logits.dim(2), W = trace.final_logits.dim(3);
    PixelMap acc(H, W, MapKind::cam);
    for (int l = 0; l < L; ++l) {
        const Tensor& X = trace.stage_features[static_cast<size_t>(l)];
        Tensor A = Tensor::zeros({X.dim(1), X.dim(2), X.dim(3)});
        for (int64_t i = 0; i < A.numel(); ++i) A[i] = X[i];
        SalienceKernel sk = equivalent_kernel(model.mhex[static_cast<size_t>(l)], l);
        PixelMap cam = mhex_cam(sk, A, cls);
        PixelMap up = upsample_map(cam, trace.upsample_factors[static_cast<size_t>(l)],
                                   MapKind::cam);
        for (size_t i = 0; i < acc.values.size(); ++i) acc.values[i] += up.values[i];
    }
    for (double& v : acc.values) v /= L;
    return acc;
}

GradCamResult grad_cam(const ModelGraph& model, const Tensor& image, int cls, int stage) {
    require(stage >= 0 && stage < model.decoder_stages(), "grad_cam: bad stage");
    require(cls >= 0 && cls < model.cfg.class_count, "grad_cam: class out of range");
    Tape tape;
    ForwardTrace trace = forward(model, tape, image);
    const Tensor& A = trace.stage_features[static_cast<size_t>(stage)];

    // score = sum over pixels of the class-c logit
    Tensor class_mask = Tensor::zeros(trace.final_logits.dims);
    const int K = trace.final_logits.dim(1);
    const int64_t hw = static_cast<int64_t>(trace.final_logits.dim(2)) *
                       trace.final_logits.dim(3);
    for (int n = 0; n < trace.final_logits.dim(0); ++n) {
        double* mp = class_mask.ptr() + (static_cast<int64_t>(n) * K + cls) * hw;
        for (int64_t p = 0; p < hw; ++p) mp[p] = 1.0;
    }
    Tensor score = ops::sum(tape, ops::mul(tape, trace.final_logits, class_mask));
    GradMap grads = tape.backward(score, {A.node});

    GradCamResult res;
    const int C = A.dim(1), h = A.dim(2), w = A.dim(3);
    const int64_t ahw = static_cast<int64_t>(h) * w;
    res.map = PixelMap(h, w, MapKind::gradcam);
    auto it = grads.find(A.node);
    if (it == grads.end()) {
        res.zero_gradient = true;
        return res;
    }
    const Tensor& g = it->second;
    bool any = false;
    std::vector<double> weights(static_cast<size_t>(C), 0.0);
    for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        const double* gp = g.ptr() + static_cast<int64_t>(c) * ahw;
        for (int64_t p = 0; p < ahw; ++p) acc += gp[p];
        weights[static_cast<size_t>(c)] = acc / static_cast<double>(ahw);
        if (acc != 0.0) any = true;
    }
    if (!any) {
        res.zero_gradient = true;
        return res;
    }
    for (int c = 0; c < C; ++c) {
        const double wv = weights[static_cast<size_t>(c)];
        const double* ap = A.ptr() + static_cast<int64_t>(c) * ahw;
        for (int64_t p = 0; p < ahw; ++p) {
            res.map.values[static_cast<size_t>(p)] += wv * ap[p];
        }
    }
    for (double& v : res.map.values) v = v > 0.0 ? v : 0.0;
    return res;
}

namespace {

// wall time of one call, repeated until the measurement clears the timer
// resolution; returns (seconds per call, repeats used)
template <typename Fn>
std::pair<double, int> time_call(Fn&& fn, double min_seconds) {
    using clock = std::chrono::steady_clock;
    int reps = 1;
    for (;;) {
        const auto t0 = clock::now();
        for (int r = 0; r < reps; ++r) fn();
        const double el = std::chrono::duration<double>(clock::now() - t0).count();
        if (el >= min_seconds || reps >= (1 << 24)) {
            return {el / reps, reps};
        }
        const double scale = el > 0.0 ? min_seconds / el * 1.5 : 16.0;
        reps = static_cast<int>(std::min<double>(reps * std::max(2.0, scale), 1 << 24));
    }
}

double median7(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

} // namespace

std::vector<CamBenchRow> cam_benchmark(const ModelGraph& model,
                                       const std::vector<int>& sizes) {
    require(model.cfg.with_mhex, "cam_benchmark: model has no MHEX+ blocks");
    require(sizes.size() >= 3, "cam_benchmark: need at least 3 sizes");
    const int stage = model.decoder_stages() - 1;
    const int cls = model.cfg.class_count > 1 ? 1 : 0;
    const MhexBlock& blk = model.mhex[static_cast<size_t>(stage)];

    std::vector<CamBenchRow> rows;
    for (int size : sizes) {
        require(size % (1 << model.cfg.depth) == 0,
                "cam_benchmark: size not divisible by 2^depth");
        Rng rng(static_cast<uint64_t>(size));
        Tensor img = Tensor::zeros({1, model.cfg.in_channels, size, size});
        for (int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();

        CamBenchRow row;
        row.size = size;
        std::vector<double> prep, gc;
        for (int t = 0; t < 7; ++t) {
            auto [sec, reps] = time_call(
                [&] { volatile double sink = equivalent_kernel(blk, stage).w_equiv[0]; (void)sink; },
                5e-3);
            prep.push_back(sec);
            row.repeats = std::max(row.repeats, reps);
        }
        for (int t = 0; t < 7; ++t) {
            auto [sec, reps] = time_call([&] { grad_cam(model, img, cls, stage); }, 5e-3);
            gc.push_back(sec);
            (void)reps;
        }
        row.mhex_prep_s = median7(prep);
        row.gradcam_s = median7(gc);
        rows.push_back(row);
    }
    return rows;
}

} // namespace eunet
