#include <doctest.h>

#include <cmath>

#include "eunet/harness.hpp"
#include "oracles.hpp"

using namespace eunet;

namespace {

std::vector<Sample> tiny_dataset(int n, int size, uint64_t seed) {
    SyntheticConfig cfg;
    cfg.image_size = size;
    cfg.sample_count = n;
    cfg.seed = seed;
    return generate_synthetic(cfg);
}

ModelConfig tiny_model_cfg(uint64_t seed) {
    ModelConfig c;
    c.with_mhex = true;
    c.base_width = 4;
    c.depth = 2;
    c.mhex_hidden = 4;
    c.seed = seed;
    return c;
}

} // namespace

TEST_CASE("scheduler: strictly improving loss keeps the lr and never stops") {
    PatienceScheduler s(1e-3, 0.5, 5, 10, 1e-6);
    double loss = 1.0;
    for (int e = 1; e <= 50; ++e) {
        CHECK(s.observe(loss));
        CHECK(s.lr() == 1e-3);
        loss -= 0.01;
    }
}

TEST_CASE("scheduler: frozen loss halves at epochs 6 and 11 and stops at 11") {
    // patience-counter simulation: epoch 1 sets the best; epochs 2..11 stall
    PatienceScheduler s(1e-3, 0.5, 5, 10, 1e-6);
    std::vector<double> lr_events;
    int stop_epoch = 0;
    for (int e = 1; e <= 50; ++e) {
        const double before = s.lr();
        const bool cont = s.observe(0.7);
        if (s.lr() != before) lr_events.push_back(static_cast<double>(e));
        if (!cont) {
            stop_epoch = e;
            break;
        }
    }
    CHECK(lr_events == std::vector<double>{6, 11});
    CHECK(stop_epoch == 11);
    CHECK(s.lr() == doctest::Approx(0.25e-3));
}

TEST_CASE("scheduler: sub-threshold improvements do not reset patience") {
    PatienceScheduler s(1e-3, 0.5, 2, 4, 1e-6);
    CHECK(s.observe(1.0));
    CHECK(s.observe(1.0 - 1e-9));  // below the improvement threshold
    CHECK(s.improved() == false);
    CHECK(s.observe(0.9));  // real improvement resets
    CHECK(s.improved() == true);
}

TEST_CASE("dice_score formula and edge cases") {
    Tensor a = Tensor::zeros({4, 4});
    Tensor b = Tensor::zeros({4, 4});
    // both empty for class 1
    CHECK(dice_score(a, b, 1) == 1.0);

    for (int i = 0; i < 4; ++i) a[i] = 1.0;
    CHECK(dice_score(a, a, 1) == 1.0);

    // disjoint nonempty masks
    for (int i = 4; i < 8; ++i) b[i] = 1.0;
    CHECK(dice_score(a, b, 1) == 0.0);

    // |P|=6, |T|=4, |P∩T|=3 -> 2*3/10 = 0.6
    Tensor p = Tensor::zeros({10, 10});
    Tensor t = Tensor::zeros({10, 10});
    for (int i = 0; i < 6; ++i) p[i] = 1.0;
    for (int i = 3; i < 7; ++i) t[i] = 1.0;
    CHECK(dice_score(p, t, 1) == doctest::Approx(0.6));
}

TEST_CASE("training improves the loss and restores the best epoch") {
    std::vector<Sample> data = tiny_dataset(16, 16, 2);
    std::vector<Sample> tr(data.begin(), data.begin() + 12);
    std::vector<Sample> va(data.begin() + 12, data.end());

    ModelGraph m = build_model(tiny_model_cfg(1));
    TrainConfig tc;
    tc.max_epochs = 4;
    tc.batch_size = 4;
    tc.seed = 1;
    TrainHistory h = train(m, tr, va, tc);
    REQUIRE(h.epochs.size() == 4);
    CHECK(h.stop_epoch == 4);
    CHECK(h.epochs.back().train_loss < h.epochs.front().train_loss);

    // returned weights evaluate to the recorded best val loss
    double best = h.epochs[0].val_loss;
    for (const EpochStats& e : h.epochs) best = std::min(best, e.val_loss);
    CHECK(h.epochs[static_cast<size_t>(h.best_epoch - 1)].val_loss == best);

    double val_loss = 0.0;
    for (const Sample& s : va) {
        Tensor img = s.image;
        img.dims = {1, 1, 16, 16};
        Tensor tgt = s.mask;
        tgt.dims = {1, 16, 16};
        Tape tape(false);
        ForwardTrace trc = forward(m, tape, img);
        val_loss += deep_supervision_loss(tape, trc.deep_preds, tgt, trc.final_logits,
                                          LossKind::ce)[0];
    }
    val_loss /= static_cast<double>(va.size());
    CHECK(val_loss == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("training history is identical for identical seeds") {
    std::vector<Sample> data = tiny_dataset(12, 16, 3);
    std::vector<Sample> tr(data.begin(), data.begin() + 8);
    std::vector<Sample> va(data.begin() + 8, data.end());
    TrainConfig tc;
    tc.max_epochs = 3;
    tc.seed = 7;

    ModelGraph m1 = build_model(tiny_model_cfg(2));
    ModelGraph m2 = build_model(tiny_model_cfg(2));
    TrainHistory h1 = train(m1, tr, va, tc);
    TrainHistory h2 = train(m2, tr, va, tc);
    CHECK(h1.to_csv() == h2.to_csv());

    std::vector<Tensor> w1 = m1.snapshot_weights();
    std::vector<Tensor> w2 = m2.snapshot_weights();
    for (size_t i = 0; i < w1.size(); ++i) CHECK(*w1[i].data == *w2[i].data);
}

TEST_CASE("lr sequence is exactly lr times factor^reductions") {
    std::vector<Sample> data = tiny_dataset(8, 16, 4);
    std::vector<Sample> tr(data.begin(), data.begin() + 6);
    std::vector<Sample> va(data.begin() + 6, data.end());
    TrainConfig tc;
    tc.max_epochs = 8;
    tc.lr_reduce_patience = 2;
    tc.early_stop_patience = 6;
    tc.seed = 5;
    ModelGraph m = build_model(tiny_model_cfg(3));
    TrainHistory h = train(m, tr, va, tc);
    for (const EpochStats& e : h.epochs) {
        const double ratio = e.lr / tc.lr;
        const double m2 = std::log(ratio) / std::log(tc.lr_factor);
        CHECK(std::abs(m2 - std::round(m2)) < 1e-12);  // exact power of the factor
        CHECK(e.lr <= tc.lr);
    }
    // and the lr never increases
    for (size_t e = 1; e < h.epochs.size(); ++e) {
        CHECK(h.epochs[e].lr <= h.epochs[e - 1].lr);
    }
}

TEST_CASE("history csv layout") {
    TrainHistory h;
    h.epochs.push_back({0.5, 0.4, 0.9, 1e-3});
    h.epochs.push_back({0.3, 0.35, 0.92, 1e-3});
    const std::string csv = h.to_csv();
    CHECK(csv.rfind("epoch,train_loss,val_loss,val_dice,lr\n", 0) == 0);
    CHECK(csv.find("1,0.5,0.4,0.9,0.001\n") != std::string::npos);
    CHECK(csv.find("2,0.3,0.35,0.92,0.001\n") != std::string::npos);
}

TEST_CASE("table-style percent formatting") {
    CHECK(format_mean_std_percent(0.8672, 0.0262) == "86.72 ± 2.62");
    CHECK(format_mean_std_percent(1.0, 0.0) == "100.00 ± 0.00");
}

TEST_CASE("cross validation over hand-built identical folds has zero std") {
    // two distinct samples, five copies each; a hand plan puts one copy of
    // each in every fold, so all folds are identical multisets
    std::vector<Sample> base = tiny_dataset(2, 16, 6);
    std::vector<Sample> data;
    for (int rep = 0; rep < 5; ++rep) {
        for (const Sample& s : base) {
            Sample c = s;
            c.id = static_cast<int>(data.size());
            data.push_back(c);
        }
    }
    FoldPlan plan;
    plan.k = 5;
    plan.seed = 0;
    for (int i = 0; i < 10; ++i) {
        plan.ids.push_back(i);
        plan.fold.push_back(i / 2);  // consecutive pairs share a fold
    }

    TrainConfig tc;
    tc.max_epochs = 2;
    tc.seed = 1;
    CrossValResult res = cross_validate(tiny_model_cfg(4), tc, data, plan);
    REQUIRE(res.fold_dice.size() == 5);
    for (double d : res.fold_dice) CHECK(d == doctest::Approx(res.fold_dice[0]));
    CHECK(res.stdev == doctest::Approx(0.0));

    // aggregate mean equals the hand average
    double mean = 0.0;
    for (double d : res.fold_dice) mean += d;
    mean /= 5.0;
    CHECK(res.mean == doctest::Approx(mean));
    CHECK(res.formatted == format_mean_std_percent(res.mean, res.stdev));
}

TEST_CASE("divergence aborts with an epoch diagnostic") {
    std::vector<Sample> data = tiny_dataset(8, 16, 8);
    std::vector<Sample> tr(data.begin(), data.begin() + 6);
    std::vector<Sample> va(data.begin() + 6, data.end());
    TrainConfig tc;
    tc.max_epochs = 3;
    tc.lr = 1e280;  // guaranteed blow-up
    ModelGraph m = build_model(tiny_model_cfg(5));
    try {
        train(m, tr, va, tc);
        FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
}
