#pragma once

#include <vector>

#include "eunet/models.hpp"
#include "eunet/pixel_map.hpp"

namespace eunet {

// Channel-mixing matrix product of a block's two 1x1 convs: one linear map
// from block input channels straight to class logits.
struct SalienceKernel {
    Tensor w_equiv;  // [K, Cin, 1, 1]
    int stage = 0;
};

SalienceKernel equivalent_kernel(const MhexBlock& block, int stage = 0);

// CAM_c(x) = sum_j w_equiv[c,j] * A[j](x); raw values, normalize for export.
// A: [Cin,h,w] activation stack (the tensor the block's conv1 consumed).
PixelMap mhex_cam(const SalienceKernel& kernel, const Tensor& A, int cls);

struct GradCamResult {
    PixelMap map;          // relu of the weighted channel sum, raw
    bool zero_gradient = false;
};

// Standard Grad-CAM against the stage-l activations: channel weights are the
// spatial mean of d(sum of class-c logits)/dA_l.
GradCamResult grad_cam(const ModelGraph& model, const Tensor& image, int cls, int stage);

// Per-stage CAMs upsampled to the input resolution and averaged.
PixelMap multi_stage_cam(const ModelGraph& model, const Tensor& image, int cls);

// Convenience: CAM for one stage from a fresh forward pass.
PixelMap mhex_cam_for_stage(const ModelGraph& model, const Tensor& image, int cls, int stage);

struct CamBenchRow {
    int size = 0;
    double mhex_prep_s = 0.0;   // equivalent-kernel construction, input-size independent
    double gradcam_s = 0.0;     // forward + backward + weighting at this size
    int repeats = 0;            // inner repetitions needed to beat timer resolution
};

// Median-of-7 wall times per input size. Tiny kernels are repeated until the
// measurement clears the timer resolution; the repeat count is reported.
std::vector<CamBenchRow> cam_benchmark(const ModelGraph& model, const std::vector<int>& sizes);

} // namespace eunet
