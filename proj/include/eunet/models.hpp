#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "eunet/mhex.hpp"
#include "eunet/pixel_map.hpp"
#include "eunet/tensor.hpp"

namespace eunet {

enum class Backbone { unet, unetpp };

struct ModelConfig {
    Backbone backbone = Backbone::unet;
    bool with_mhex = false;
    int in_channels = 1;
    int class_count = 2;
    int base_width = 8;
    int depth = 3;        // encoder stages; also the decoder stage count L
    int mhex_hidden = 16;
    uint64_t seed = 0;

    void validate() const;
};

struct ConvLayer {
    Tensor w;  // [Cout,Cin,kh,kw]
    Tensor b;  // [Cout]
    int pad = 0;
};

// conv-relu-conv-relu, plus an identity shortcut on decoder units
// (1x1 projection when the channel counts differ)
struct DoubleConv {
    ConvLayer c1;
    ConvLayer c2;
    std::optional<ConvLayer> proj;
    bool residual = false;
    int in_ch = 0;
    int out_ch = 0;
};

struct ParamCount {
    int64_t total = 0;
    int64_t mhex_only = 0;
};

// A built network. U-Net uses enc/bottleneck/dec; U-Net++ uses the nested
// grid (grid[i][j] at resolution H/2^i, j = 0 is the encoder column). MHEX+
// blocks sit one per decoder stage in forward-execution order, deepest
// stage first.
struct ModelGraph {
    ModelConfig cfg;

    std::vector<DoubleConv> enc;
    DoubleConv bottleneck;
    std::vector<DoubleConv> dec;

    std::vector<std::vector<DoubleConv>> grid;

    ConvLayer head;  // 1x1 to class logits
    std::vector<MhexBlock> mhex;

    int decoder_stages() const { return cfg.depth; }

    // fixed traversal over every parameter tensor; the same order drives
    // init, checkpoints, and the optimizer
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;

    std::vector<Tensor> snapshot_weights() const;
    void restore_weights(const std::vector<Tensor>& snap);
};

struct ForwardOptions {
    bool mhex_residual = true;  // diagnostic switch: drop the attended branch
};

struct ForwardTrace {
    Tensor final_logits;                 // [N,K,H,W]
    std::vector<Tensor> deep_preds;      // native resolution, execution order
    // decoder-stage double-conv outputs; with MHEX these are exactly the X_l
    // each block consumed, and they back the CAM/Grad-CAM activations
    std::vector<Tensor> stage_features;
    std::vector<MhexOutput> mhex_outputs;
    std::vector<int> upsample_factors;   // deep_pred_l * factor = full res
    std::vector<int> mhex_conv1_nodes;   // tape node of each block's C1
    std::vector<int> param_nodes;        // watched nodes, for_each_param order
};

ModelGraph build_model(const ModelConfig& cfg);

ForwardTrace forward(const ModelGraph& model, Tape& tape, const Tensor& image,
                     const ForwardOptions& opts = {});

ParamCount param_count(const ModelGraph& model);

struct Prediction {
    Tensor mask;            // [H,W] class ids, ties broken toward lower id
    PixelMap confidence;    // max-class softmax probability
    Tensor probs;           // [K,H,W]
};

// single-image inference (N = 1)
Prediction predict(const ModelGraph& model, const Tensor& image);

} // namespace eunet
