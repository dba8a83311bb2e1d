#include "eunet/mhex.hpp"

#include <cmath>

namespace eunet {

MhexBlock make_mhex_block(int in_channels, int hidden_width, int class_count, Rng& rng) {
    require(in_channels > 0 && hidden_width > 0 && class_count >= 2,
            "make_mhex_block: invalid dimensions");
    MhexBlock b;
    b.in_channels = in_channels;
    b.hidden_width = hidden_width;
    b.class_count = class_count;
    b.conv1_weight = Tensor::zeros({hidden_width, in_channels, 1, 1});
    b.conv2_weight = Tensor::zeros({class_count, hidden_width, 1, 1});
    const double s1 = std::sqrt(2.0 / in_channels);
    for (int64_t i = 0; i < b.conv1_weight.numel(); ++i) b.conv1_weight[i] = s1 * rng.normal();
    const double s2 = std::sqrt(2.0 / hidden_width);
    for (int64_t i = 0; i < b.conv2_weight.numel(); ++i) b.conv2_weight[i] = s2 * rng.normal();
    return b;
}

MhexOutput mhex_forward_watched(Tape& tp, const Tensor& conv1_w, const Tensor& conv2_w,
                                const Tensor& X) {
    require(X.rank() == 4, "mhex_forward: X must be 4-D [N,Cin,h,w]");
    require(conv1_w.dim(2) == 1 && conv1_w.dim(3) == 1 &&
            conv2_w.dim(2) == 1 && conv2_w.dim(3) == 1,
            "mhex_forward: kernels must be 1x1");
    require(X.dim(1) == conv1_w.dim(1), "mhex_forward: channel mismatch");
    MhexOutput o;
    o.Y = ops::relu(tp, ops::conv2d(tp, X, conv1_w));
    o.gate = ops::sigmoid(tp, o.Y);
    o.attended = ops::mul(tp, o.gate, o.Y);
    // the deep prediction head reads Y, not the gated branch
    o.deep_pred = ops::conv2d(tp, o.Y, conv2_w);
    return o;
}

MhexOutput mhex_forward(Tape& tp, const MhexBlock& block, const Tensor& X) {
    return mhex_forward_watched(tp, block.conv1_weight, block.conv2_weight, X);
}

Tensor one_hot(const Tensor& target, int class_count) {
    require(target.rank() == 3, "one_hot: target must be [N,H,W]");
    const int N = target.dim(0), H = target.dim(1), W = target.dim(2);
    Tensor out = Tensor::zeros({N, class_count, H, W});
    const int64_t hw = static_cast<int64_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        for (int64_t p = 0; p < hw; ++p) {
            const double tv = target[n * hw + p];
            const int t = static_cast<int>(tv);
            require(tv == static_cast<double>(t) && t >= 0 && t < class_count,
                    "one_hot: class id out of range");
            out[(static_cast<int64_t>(n) * class_count + t) * hw + p] = 1.0;
        }
    }
    return out;
}

Tensor segmentation_loss(Tape& tp, const Tensor& logits, const Tensor& target,
                         LossKind kind) {
    if (kind == LossKind::ce) {
        return ops::softmax_ce(tp, logits, target);
    }
    Tensor probs = ops::softmax(tp, logits);
    return ops::dice_loss(tp, probs, one_hot(target, logits.dim(1)));
}

Tensor deep_supervision_loss(Tape& tp, const std::vector<Tensor>& deep_preds,
                             const Tensor& target, const Tensor& final_logits,
                             LossKind kind, double aux_weight_override) {
    require(!deep_preds.empty(), "deep_supervision_loss: no deep predictions");
    const int H = final_logits.dim(2), W = final_logits.dim(3);
    Tensor total = segmentation_loss(tp, final_logits, target, kind);
    const double aux_w = aux_weight_override >= 0.0
                             ? aux_weight_override
                             : 1.0 / static_cast<double>(deep_preds.size());
    for (const Tensor& dp : deep_preds) {
        require(H % dp.dim(2) == 0 && W % dp.dim(3) == 0,
                "deep_supervision_loss: head resolution does not divide the target");
        const int f = H / dp.dim(2);
        require(dp.dim(3) * f == W, "deep_supervision_loss: anisotropic head resolution");
        Tensor up = (f == 1) ? dp : ops::upsample_nearest(tp, dp, f);
        Tensor l = segmentation_loss(tp, up, target, kind);
        total = ops::add(tp, total, ops::scale(tp, l, aux_w));
    }
    return total;
}

} // namespace eunet
