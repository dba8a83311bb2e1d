#include "eunet/models.hpp"

#include <cmath>
#include <unordered_map>

#include "eunet/rng.hpp"

namespace eunet {

void ModelConfig::validate() const {
    require(depth >= 2, "ModelConfig: depth must be >= 2");
    require(base_width >= 4, "ModelConfig: base_width must be >= 4");
    require(class_count >= 2, "ModelConfig: class_count must be >= 2");
    require(in_channels >= 1, "ModelConfig: in_channels must be >= 1");
    require(mhex_hidden >= 1, "ModelConfig: mhex_hidden must be >= 1");
}

namespace {

ConvLayer make_conv(int cin, int cout, int k, int pad, Rng& rng) {
    ConvLayer c;
    c.w = Tensor::zeros({cout, cin, k, k});
    c.b = Tensor::zeros({cout});
    c.pad = pad;
    const double s = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    for (int64_t i = 0; i < c.w.numel(); ++i) c.w[i] = s * rng.normal();
    return c;
}

DoubleConv make_double_conv(int cin, int cout, bool residual, Rng& rng) {
    DoubleConv d;
    d.in_ch = cin;
    d.out_ch = cout;
    d.residual = residual;
    d.c1 = make_conv(cin, cout, 3, 1, rng);
    d.c2 = make_conv(cout, cout, 3, 1, rng);
    if (residual && cin != cout) d.proj = make_conv(cin, cout, 1, 0, rng);
    return d;
}

struct WatchedParams {
    std::unordered_map<const Tensor*, Tensor> by_addr;

    const Tensor& operator()(const Tensor& orig) const {
        auto it = by_addr.find(&orig);
        require(it != by_addr.end(), "forward: parameter was not watched");
        return it->second;
    }
};

Tensor apply_conv(Tape& tp, const WatchedParams& wp, const ConvLayer& c, const Tensor& x) {
    return ops::add_bias(tp, ops::conv2d(tp, x, wp(c.w), 1, c.pad), wp(c.b));
}

Tensor apply_double_conv(Tape& tp, const WatchedParams& wp, const DoubleConv& d,
                         const Tensor& x) {
    Tensor h = ops::relu(tp, apply_conv(tp, wp, d.c1, x));
    h = ops::relu(tp, apply_conv(tp, wp, d.c2, h));
    if (!d.residual) return h;
    Tensor sc = d.proj ? apply_conv(tp, wp, *d.proj, x) : x;
    return ops::add(tp, h, sc);
}

void visit_conv(const std::string& prefix, ConvLayer& c,
                const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + ".w", c.w);
    fn(prefix + ".b", c.b);
}

void visit_double_conv(const std::string& prefix, DoubleConv& d,
                       const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_conv(prefix + ".c1", d.c1, fn);
    visit_conv(prefix + ".c2", d.c2, fn);
    if (d.proj) visit_conv(prefix + ".proj", *d.proj, fn);
}

} // namespace

void ModelGraph::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
    if (cfg.backbone == Backbone::unet) {
        for (size_t i = 0; i < enc.size(); ++i) {
            visit_double_conv("enc" + std::to_string(i), enc[i], fn);
        }
        visit_double_conv("bottleneck", bottleneck, fn);
        for (size_t s = 0; s < dec.size(); ++s) {
            visit_double_conv("dec" + std::to_string(s), dec[s], fn);
        }
    } else {
        for (size_t i = 0; i < grid.size(); ++i) {
            for (size_t j = 0; j < grid[i].size(); ++j) {
                visit_double_conv("node" + std::to_string(i) + "_" + std::to_string(j),
                                  grid[i][j], fn);
            }
        }
    }
    visit_conv("head", head, fn);
    for (size_t l = 0; l < mhex.size(); ++l) {
        fn("mhex" + std::to_string(l) + ".c1", mhex[l].conv1_weight);
        fn("mhex" + std::to_string(l) + ".c2", mhex[l].conv2_weight);
    }
}

void ModelGraph::for_each_param(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    auto* self = const_cast<ModelGraph*>(this);
    self->for_each_param([&fn](const std::string& name, Tensor& t) {
        fn(name, static_cast<const Tensor&>(t));
    });
}

std::vector<Tensor> ModelGraph::snapshot_weights() const {
    std::vector<Tensor> snap;
    for_each_param([&snap](const std::string&, const Tensor& t) {
        snap.push_back(t.clone());
    });
    return snap;
}

void ModelGraph::restore_weights(const std::vector<Tensor>& snap) {
    size_t i = 0;
    for_each_param([&](const std::string&, Tensor& t) {
        require(i < snap.size() && snap[i].dims == t.dims,
                "restore_weights: snapshot mismatch");
        t = snap[i++].clone();
    });
    require(i == snap.size(), "restore_weights: snapshot length mismatch");
}

ModelGraph build_model(const ModelConfig& cfg) {
    cfg.validate();
    ModelGraph m;
    m.cfg = cfg;
    Rng rng(cfg.seed);
    const int D = cfg.depth;
    auto width = [&](int i) { return cfg.base_width << i; };

    if (cfg.backbone == Backbone::unet) {
        for (int i = 0; i < D; ++i) {
            m.enc.push_back(make_double_conv(i == 0 ? cfg.in_channels : width(i - 1),
                                             width(i), false, rng));
        }
        m.bottleneck = make_double_conv(width(D - 1), width(D), false, rng);
        for (int s = 0; s < D; ++s) {
            // stage s consumes up(previous) + the mirrored encoder skip
            const int skip_ch = width(D - 1 - s);
            const int up_ch = (s == 0) ? width(D) : width(D - s);
            m.dec.push_back(make_double_conv(up_ch + skip_ch, skip_ch, true, rng));
        }
        m.head = make_conv(width(0), cfg.class_count, 1, 0, rng);
    } else {
        m.grid.resize(static_cast<size_t>(D) + 1);
        for (int i = 0; i <= D; ++i) {
            m.grid[static_cast<size_t>(i)].push_back(make_double_conv(
                i == 0 ? cfg.in_channels : width(i - 1), width(i), false, rng));
        }
        // nested nodes, column by column in forward-execution order
        for (int j = 1; j <= D; ++j) {
            for (int i = 0; i + j <= D; ++i) {
                const int cin = j * width(i) + width(i + 1);
                m.grid[static_cast<size_t>(i)].push_back(
                    make_double_conv(cin, width(i), true, rng));
            }
        }
        m.head = make_conv(width(0), cfg.class_count, 1, 0, rng);
    }

    if (cfg.with_mhex) {
        for (int l = 0; l < D; ++l) {
            // block l reads the stage output at resolution H / 2^(D-1-l)
            const int cin = width(D - 1 - l);
            m.mhex.push_back(make_mhex_block(cin, cfg.mhex_hidden, cfg.class_count, rng));
        }
    }
    return m;
}

namespace {

// attach one MHEX+ block to a decoder-stage output and hand the merged
// stream downstream; the attended branch folds in as a channel-mean residual
Tensor mhex_stage(Tape& tp, const WatchedParams& wp, const ModelGraph& model, int stage,
                  const Tensor& stage_out, const ForwardOptions& opts,
                  ForwardTrace& trace) {
    const MhexBlock& blk = model.mhex[static_cast<size_t>(stage)];
    const Tensor& c1 = wp(blk.conv1_weight);
    const Tensor& c2 = wp(blk.conv2_weight);
    MhexOutput mo = mhex_forward_watched(tp, c1, c2, stage_out);
    trace.mhex_conv1_nodes.push_back(c1.node);
    trace.deep_preds.push_back(mo.deep_pred);
    Tensor merged = stage_out;
    if (opts.mhex_residual) {
        merged = ops::add_broadcast1(tp, stage_out, ops::channel_mean(tp, mo.attended));
    }
    trace.mhex_outputs.push_back(std::move(mo));
    return merged;
}

} // namespace

ForwardTrace forward(const ModelGraph& model, Tape& tape, const Tensor& image,
                     const ForwardOptions& opts) {
    require(image.rank() == 4, "forward: image must be 4-D [N,Cin,H,W]");
    require(image.dim(1) == model.cfg.in_channels, "forward: channel mismatch");
    const int D = model.cfg.depth;
    const int H = image.dim(2), W = image.dim(3);
    require(H % (1 << D) == 0 && W % (1 << D) == 0,
            "forward: spatial dims must be divisible by 2^depth");

    WatchedParams wp;
    ForwardTrace trace;
    model.for_each_param([&](const std::string&, const Tensor& t) {
        Tensor w = tape.watch(t);
        trace.param_nodes.push_back(w.node);
        wp.by_addr.emplace(&t, std::move(w));
    });

    Tensor logits_in;  // full-resolution features entering the head
    if (model.cfg.backbone == Backbone::unet) {
        std::vector<Tensor> skips;
        Tensor cur = image;
        for (int i = 0; i < D; ++i) {
            cur = apply_double_conv(tape, wp, model.enc[static_cast<size_t>(i)], cur);
            skips.push_back(cur);
            cur = ops::maxpool2(tape, cur);
        }
        cur = apply_double_conv(tape, wp, model.bottleneck, cur);
        for (int s = 0; s < D; ++s) {
            Tensor up = ops::upsample_nearest(tape, cur, 2);
            Tensor cat = ops::concat_channels(
                tape, {up, skips[static_cast<size_t>(D - 1 - s)]});
            Tensor d = apply_double_conv(tape, wp, model.dec[static_cast<size_t>(s)], cat);
            trace.stage_features.push_back(d);
            cur = model.cfg.with_mhex ? mhex_stage(tape, wp, model, s, d, opts, trace) : d;
        }
        logits_in = cur;
    } else {
        // grid[i][j] activations; column 0 is the encoder chain
        std::vector<std::vector<Tensor>> acts(static_cast<size_t>(D) + 1);
        Tensor cur = image;
        for (int i = 0; i <= D; ++i) {
            if (i > 0) cur = ops::maxpool2(tape, cur);
            cur = apply_double_conv(tape, wp, model.grid[static_cast<size_t>(i)][0], cur);
            acts[static_cast<size_t>(i)].push_back(cur);
        }
        for (int j = 1; j <= D; ++j) {
            for (int i = 0; i + j <= D; ++i) {
                std::vector<Tensor> ins(acts[static_cast<size_t>(i)].begin(),
                                        acts[static_cast<size_t>(i)].end());
                ins.push_back(ops::upsample_nearest(
                    tape, acts[static_cast<size_t>(i + 1)][static_cast<size_t>(j - 1)], 2));
                Tensor cat = ops::concat_channels(tape, ins);
                Tensor d = apply_double_conv(
                    tape, wp, model.grid[static_cast<size_t>(i)][static_cast<size_t>(j)], cat);
                if (i + j == D) {
                    trace.stage_features.push_back(d);
                    if (model.cfg.with_mhex) {
                        d = mhex_stage(tape, wp, model, j - 1, d, opts, trace);
                    }
                }
                acts[static_cast<size_t>(i)].push_back(d);
            }
        }
        logits_in = acts[0][static_cast<size_t>(D)];
    }

    trace.final_logits = apply_conv(tape, wp, model.head, logits_in);
    for (int l = 0; l < static_cast<int>(trace.deep_preds.size()); ++l) {
        trace.upsample_factors.push_back(1 << (D - 1 - l));
    }
    return trace;
}

ParamCount param_count(const ModelGraph& model) {
    ParamCount pc;
    model.for_each_param([&pc](const std::string& name, const Tensor& t) {
        pc.total += t.numel();
        if (name.rfind("mhex", 0) == 0) pc.mhex_only += t.numel();
    });
    return pc;
}

Prediction predict(const ModelGraph& model, const Tensor& image) {
    require(image.dim(0) == 1, "predict: single-image inference only");
    Tape tape(false);
    ForwardTrace trace = forward(model, tape, image);
    Tensor probs4 = ops::softmax(tape, trace.final_logits);
    const int K = probs4.dim(1), H = probs4.dim(2), W = probs4.dim(3);
    const int64_t hw = static_cast<int64_t>(H) * W;

    Prediction p;
    p.mask = Tensor::zeros({H, W});
    p.confidence = PixelMap(H, W, MapKind::confidence);
    p.probs = Tensor::zeros({K, H, W});
    for (int64_t i = 0; i < probs4.numel(); ++i) p.probs[i] = probs4[i];
    for (int64_t px = 0; px < hw; ++px) {
        int best = 0;
        double bv = p.probs[px];
        for (int k = 1; k < K; ++k) {
            const double v = p.probs[k * hw + px];
            if (v > bv) { bv = v; best = k; }
        }
        p.mask[px] = static_cast<double>(best);
        p.confidence.values[static_cast<size_t>(px)] = bv;
    }
    return p;
}

} // namespace eunet
