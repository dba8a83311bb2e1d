#pragma once

#include <vector>

#include "eunet/rng.hpp"
#include "eunet/tensor.hpp"

namespace eunet {

// One MHEX+ side block: a 1x1 conv + ReLU into a hidden width, a sigmoid
// self-gate, and a 1x1 conv deep-prediction head. Neither conv carries a
// bias term.
struct MhexBlock {
    Tensor conv1_weight;  // [Hd, Cin, 1, 1]
    Tensor conv2_weight;  // [K, Hd, 1, 1]
    int hidden_width = 0;
    int in_channels = 0;
    int class_count = 0;

    int64_t param_count() const {
        return static_cast<int64_t>(hidden_width) * in_channels +
               static_cast<int64_t>(class_count) * hidden_width;
    }
};

struct MhexOutput {
    Tensor Y;           // relu(conv1(X)), [N,Hd,h,w]
    Tensor gate;        // sigmoid(Y)
    Tensor attended;    // gate * Y
    Tensor deep_pred;   // conv2(Y), [N,K,h,w]
};

MhexBlock make_mhex_block(int in_channels, int hidden_width, int class_count, Rng& rng);

MhexOutput mhex_forward(Tape& tp, const MhexBlock& block, const Tensor& X);

// Same computation against caller-watched weights; used when the block's
// parameters are already on the tape.
MhexOutput mhex_forward_watched(Tape& tp, const Tensor& conv1_w, const Tensor& conv2_w,
                                const Tensor& X);

enum class LossKind { ce, dice };

// loss(final) + (1/L) * sum_l loss(upsample_to_full(deep_pred_l)).
// Auxiliary predictions are upsampled to the final resolution, so one
// ground-truth tensor serves every head.
Tensor deep_supervision_loss(Tape& tp, const std::vector<Tensor>& deep_preds,
                             const Tensor& target, const Tensor& final_logits,
                             LossKind kind, double aux_weight_override = -1.0);

// loss of a single head at full resolution (helper shared with the harness)
Tensor segmentation_loss(Tape& tp, const Tensor& logits, const Tensor& target,
                         LossKind kind);

// target [N,H,W] of class ids -> one-hot [N,K,H,W] (constant tensor)
Tensor one_hot(const Tensor& target, int class_count);

} // namespace eunet
