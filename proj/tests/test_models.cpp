#include <doctest.h>

#include <cmath>

#include "eunet/models.hpp"
#include "oracles.hpp"

using namespace eunet;

namespace {

// layer-by-layer arithmetic, written out independently of for_each_param
int64_t conv_params(int cin, int cout, int k) { return int64_t(cout) * cin * k * k + cout; }

int64_t double_conv_params(int cin, int cout, bool residual) {
    int64_t n = conv_params(cin, cout, 3) + conv_params(cout, cout, 3);
    if (residual && cin != cout) n += conv_params(cin, cout, 1);
    return n;
}

int64_t unet_backbone_params(const ModelConfig& c) {
    auto w = [&](int i) { return c.base_width << i; };
    int64_t n = 0;
    for (int i = 0; i < c.depth; ++i) {
        n += double_conv_params(i == 0 ? c.in_channels : w(i - 1), w(i), false);
    }
    n += double_conv_params(w(c.depth - 1), w(c.depth), false);
    for (int s = 0; s < c.depth; ++s) {
        const int skip = w(c.depth - 1 - s);
        const int up = s == 0 ? w(c.depth) : w(c.depth - s);
        n += double_conv_params(up + skip, skip, true);
    }
    n += conv_params(w(0), c.class_count, 1);
    return n;
}

int64_t unetpp_backbone_params(const ModelConfig& c) {
    auto w = [&](int i) { return c.base_width << i; };
    int64_t n = 0;
    for (int i = 0; i <= c.depth; ++i) {
        n += double_conv_params(i == 0 ? c.in_channels : w(i - 1), w(i), false);
    }
    for (int j = 1; j <= c.depth; ++j) {
        for (int i = 0; i + j <= c.depth; ++i) {
            n += double_conv_params(j * w(i) + w(i + 1), w(i), true);
        }
    }
    n += conv_params(w(0), c.class_count, 1);
    return n;
}

int64_t mhex_params(const ModelConfig& c) {
    auto w = [&](int i) { return c.base_width << i; };
    int64_t n = 0;
    for (int l = 0; l < c.depth; ++l) {
        n += int64_t(c.mhex_hidden) * w(c.depth - 1 - l) +
             int64_t(c.class_count) * c.mhex_hidden;
    }
    return n;
}

ModelConfig toy_unet(bool with_mhex) {
    ModelConfig c;
    c.backbone = Backbone::unet;
    c.with_mhex = with_mhex;
    c.base_width = 8;
    c.depth = 3;
    c.class_count = 2;
    c.seed = 1;
    return c;
}

} // namespace

TEST_CASE("unet parameter count matches the per-layer arithmetic oracle") {
    ModelConfig c = toy_unet(false);
    ModelGraph m = build_model(c);
    ParamCount pc = param_count(m);
    CHECK(pc.total == unet_backbone_params(c));
    CHECK(pc.mhex_only == 0);
}

TEST_CASE("mhex parameter delta equals the block formula") {
    for (Backbone bb : {Backbone::unet, Backbone::unetpp}) {
        ModelConfig base = toy_unet(false);
        base.backbone = bb;
        ModelConfig with = base;
        with.with_mhex = true;
        ParamCount a = param_count(build_model(base));
        ParamCount b = param_count(build_model(with));
        CHECK(b.total - a.total == mhex_params(with));
        CHECK(b.mhex_only == mhex_params(with));
    }
}

TEST_CASE("unetpp parameter count matches the per-layer arithmetic oracle") {
    ModelConfig c;
    c.backbone = Backbone::unetpp;
    c.base_width = 4;
    c.depth = 2;
    c.class_count = 2;
    c.with_mhex = true;
    ModelGraph m = build_model(c);
    ParamCount pc = param_count(m);
    CHECK(pc.total == unetpp_backbone_params(c) + mhex_params(c));
    CHECK(pc.mhex_only == mhex_params(c));
}

TEST_CASE("paper-scale widths keep the mhex overhead under 0.1M") {
    ModelConfig c;
    c.base_width = 64;
    c.depth = 4;
    c.mhex_hidden = 16;
    c.class_count = 2;
    c.with_mhex = true;
    // formula check without building the 7M-parameter graph
    CHECK(mhex_params(c) < 100000);
    CHECK(mhex_params(c) == 16 * (512 + 256 + 128 + 64) + 4 * 2 * 16);
}

TEST_CASE("identical seeds build bit-identical models") {
    ModelConfig c = toy_unet(true);
    ModelGraph a = build_model(c);
    ModelGraph b = build_model(c);
    std::vector<Tensor> wa = a.snapshot_weights(), wb = b.snapshot_weights();
    REQUIRE(wa.size() == wb.size());
    for (size_t i = 0; i < wa.size(); ++i) {
        CHECK(*wa[i].data == *wb[i].data);  // bitwise
    }
}

TEST_CASE("forward shape contract and deep prediction resolutions") {
    ModelConfig c = toy_unet(true);
    ModelGraph m = build_model(c);
    Rng rng(2);
    Tensor img = oracle::random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
    Tape tp(false);
    ForwardTrace tr = forward(m, tp, img);
    CHECK(tr.final_logits.dims == std::vector<int>{1, 2, 16, 16});
    REQUIRE(tr.deep_preds.size() == 3);
    CHECK(tr.deep_preds[0].dim(2) == 4);
    CHECK(tr.deep_preds[1].dim(2) == 8);
    CHECK(tr.deep_preds[2].dim(2) == 16);
    CHECK(tr.upsample_factors == std::vector<int>{4, 2, 1});

    CHECK_THROWS_AS(forward(m, tp, oracle::random_tensor({1, 1, 12, 12}, rng)),
                    ContractViolation);
}

TEST_CASE("all-zero parameters produce all-zero logits") {
    ModelConfig c = toy_unet(false);
    ModelGraph m = build_model(c);
    m.for_each_param([](const std::string&, Tensor& t) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
    });
    Tape tp(false);
    ForwardTrace tr = forward(m, tp, Tensor::full({1, 1, 16, 16}, 0.3));
    for (int64_t i = 0; i < tr.final_logits.numel(); ++i) CHECK(tr.final_logits[i] == 0.0);
}

TEST_CASE("disabling the attended residual reproduces the baseline forward") {
    // same seed => identical backbone draws; mhex weights are drawn afterwards
    for (Backbone bb : {Backbone::unet, Backbone::unetpp}) {
        ModelConfig cb = toy_unet(false);
        cb.backbone = bb;
        if (bb == Backbone::unetpp) cb.base_width = 4;
        ModelConfig cm = cb;
        cm.with_mhex = true;
        ModelGraph base = build_model(cb);
        ModelGraph with = build_model(cm);

        Rng rng(3);
        Tensor img = oracle::random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
        Tape t1(false), t2(false);
        ForwardOptions ablate;
        ablate.mhex_residual = false;
        Tensor a = forward(base, t1, img).final_logits;
        Tensor b = forward(with, t2, img, ablate).final_logits;
        CHECK(oracle::max_abs_diff(a, b) < 1e-12);
    }
}

TEST_CASE("zeroed mhex weights leave the argmax mask at the baseline") {
    ModelConfig cb = toy_unet(false);
    ModelConfig cm = toy_unet(true);
    ModelGraph base = build_model(cb);
    ModelGraph with = build_model(cm);
    with.for_each_param([](const std::string& name, Tensor& t) {
        if (name.rfind("mhex", 0) == 0) {
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
        }
    });
    Rng rng(4);
    Tensor img = oracle::random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
    Prediction pa = predict(base, img);
    Prediction pb = predict(with, img);
    for (int64_t i = 0; i < pa.mask.numel(); ++i) CHECK(pa.mask[i] == pb.mask[i]);
}

TEST_CASE("forward is pure") {
    ModelConfig c = toy_unet(true);
    ModelGraph m = build_model(c);
    Rng rng(5);
    Tensor img = oracle::random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
    Tape t1(false), t2(false);
    ForwardTrace a = forward(m, t1, img);
    ForwardTrace b = forward(m, t2, img);
    CHECK(*a.final_logits.data == *b.final_logits.data);
    for (size_t l = 0; l < a.deep_preds.size(); ++l) {
        CHECK(*a.deep_preds[l].data == *b.deep_preds[l].data);
    }
}

TEST_CASE("full model gradient check at 16x16") {
    for (Backbone bb : {Backbone::unet, Backbone::unetpp}) {
        ModelConfig c = toy_unet(true);
        c.backbone = bb;
        c.base_width = 4;
        c.mhex_hidden = 4;
        ModelGraph m = build_model(c);
        Rng rng(6);
        Tensor img = oracle::random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
        Tensor target = Tensor::zeros({1, 16, 16});
        for (int64_t i = 0; i < 256; ++i) target[i] = rng.uniform_int(0, 1);

        const double err = finite_diff_check(
            [&](Tape& t, const Tensor& v) {
                ForwardTrace tr = forward(m, t, v);
                return deep_supervision_loss(t, tr.deep_preds, target, tr.final_logits,
                                             LossKind::ce);
            },
            img, 1e-5);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("predict tie-breaking, confidence, and shift invariance") {
    ModelConfig c = toy_unet(false);
    ModelGraph m = build_model(c);
    m.for_each_param([](const std::string&, Tensor& t) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = 0.0;
    });
    Tensor img = Tensor::full({1, 1, 16, 16}, 0.4);

    // uniform logits: confidence 1/K, ties resolve to class 0
    Prediction p = predict(m, img);
    for (int64_t i = 0; i < p.mask.numel(); ++i) {
        CHECK(p.mask[i] == 0.0);
        CHECK(p.confidence.values[static_cast<size_t>(i)] == doctest::Approx(0.5));
    }

    // push class 1 up by 10 via the head bias
    m.for_each_param([](const std::string& name, Tensor& t) {
        if (name == "head.b") t[1] = 10.0;
    });
    p = predict(m, img);
    for (int64_t i = 0; i < p.mask.numel(); ++i) {
        CHECK(p.mask[i] == 1.0);
        CHECK(p.confidence.values[static_cast<size_t>(i)] > 0.9999);
    }

    // adding one constant to every class logit must not move the argmax
    m.for_each_param([](const std::string& name, Tensor& t) {
        if (name == "head.b") {
            t[0] += 7.5;
            t[1] += 7.5;
        }
    });
    Prediction q = predict(m, img);
    for (int64_t i = 0; i < q.mask.numel(); ++i) CHECK(q.mask[i] == p.mask[i]);
}

TEST_CASE("config invariants are enforced") {
    ModelConfig c;
    c.depth = 1;
    CHECK_THROWS_AS(build_model(c), ContractViolation);
    c = ModelConfig{};
    c.base_width = 2;
    CHECK_THROWS_AS(build_model(c), ContractViolation);
    c = ModelConfig{};
    c.class_count = 1;
    CHECK_THROWS_AS(build_model(c), ContractViolation);
}
