#include "eunet/harness.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "eunet/rng.hpp"

namespace eunet {

void TrainConfig::validate() const {
    require(max_epochs >= 1, "TrainConfig: max_epochs must be >= 1");
    require(early_stop_patience >= 1 && lr_reduce_patience >= 1,
            "TrainConfig: patience values must be >= 1");
    require(lr > 0.0, "TrainConfig: lr must be positive");
    require(lr_factor > 0.0 && lr_factor < 1.0, "TrainConfig: lr_factor must be in (0,1)");
    require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
}

PatienceScheduler::PatienceScheduler(double lr, double lr_factor, int lr_patience,
                                     int stop_patience, double improve_eps)
    : lr_(lr), lr_factor_(lr_factor), best_(0.0), improve_eps_(improve_eps),
      lr_patience_(lr_patience), stop_patience_(stop_patience) {}

bool PatienceScheduler::observe(double val_loss) {
    if (!seen_any_ || val_loss < best_ - improve_eps_) {
        seen_any_ = true;
        best_ = val_loss;
        improved_ = true;
        lr_streak_ = 0;
        stop_streak_ = 0;
        return true;
    }
    improved_ = false;
    ++lr_streak_;
    ++stop_streak_;
    if (lr_streak_ >= lr_patience_) {
        lr_ *= lr_factor_;
        lr_streak_ = 0;
    }
    return stop_streak_ < stop_patience_;
}

std::string TrainHistory::to_csv() const {
    std::string out = "epoch,train_loss,val_loss,val_dice,lr\n";
    for (size_t e = 0; e < epochs.size(); ++e) {
        out += std::to_string(e + 1);
        out += ',';
        out += fmt_double(epochs[e].train_loss);
        out += ',';
        out += fmt_double(epochs[e].val_loss);
        out += ',';
        out += fmt_double(epochs[e].val_dice);
        out += ',';
        out += fmt_double(epochs[e].lr);
        out += '\n';
    }
    return out;
}

namespace {

struct Batch {
    Tensor images;   // [B,Cin,H,W]
    Tensor targets;  // [B,H,W]
};

Batch make_batch(const std::vector<Sample>& set, const std::vector<int>& idx,
                 size_t from, size_t to) {
    const Tensor& first = set[static_cast<size_t>(idx[from])].image;
    const int C = first.dim(0), H = first.dim(1), W = first.dim(2);
    const int B = static_cast<int>(to - from);
    Batch b;
    b.images = Tensor::zeros({B, C, H, W});
    b.targets = Tensor::zeros({B, H, W});
    const int64_t chw = static_cast<int64_t>(C) * H * W;
    const int64_t hw = static_cast<int64_t>(H) * W;
    for (size_t s = from; s < to; ++s) {
        const Sample& smp = set[static_cast<size_t>(idx[s])];
        require(smp.image.dims == first.dims, "train: inconsistent sample shapes");
        const int64_t off = static_cast<int64_t>(s - from);
        for (int64_t i = 0; i < chw; ++i) b.images[off * chw + i] = smp.image[i];
        for (int64_t i = 0; i < hw; ++i) b.targets[off * hw + i] = smp.mask[i];
    }
    return b;
}

Tensor model_loss(Tape& tape, const ModelGraph& model, const ForwardTrace& trace,
                  const Tensor& targets, LossKind kind) {
    if (model.cfg.with_mhex) {
        return deep_supervision_loss(tape, trace.deep_preds, targets,
                                     trace.final_logits, kind);
    }
    return segmentation_loss(tape, trace.final_logits, targets, kind);
}

} // namespace

double dice_score(const Tensor& pred_mask, const Tensor& true_mask, int cls) {
    require(pred_mask.dims == true_mask.dims, "dice_score: dimension mismatch");
    int64_t p = 0, t = 0, inter = 0;
    const int64_t n = pred_mask.numel();
    for (int64_t i = 0; i < n; ++i) {
        const bool ip = pred_mask[i] == static_cast<double>(cls);
        const bool it = true_mask[i] == static_cast<double>(cls);
        p += ip;
        t += it;
        inter += (ip && it);
    }
    if (p + t == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

double evaluate_dice(const ModelGraph& model, const std::vector<Sample>& set) {
    require(!set.empty(), "evaluate_dice: empty set");
    const int K = model.cfg.class_count;
    double acc = 0.0;
    for (const Sample& smp : set) {
        Tensor img = smp.image;
        img.dims = {1, smp.image.dim(0), smp.image.dim(1), smp.image.dim(2)};
        Prediction pr = predict(model, img);
        double d = 0.0;
        for (int c = 1; c < K; ++c) d += dice_score(pr.mask, smp.mask, c);
        acc += d / (K - 1);
    }
    return acc / static_cast<double>(set.size());
}

TrainHistory train(ModelGraph& model, const std::vector<Sample>& train_set,
                   const std::vector<Sample>& val_set, const TrainConfig& cfg) {
    cfg.validate();
    require(!train_set.empty() && !val_set.empty(), "train: empty split");

    std::vector<Tensor*> params;
    model.for_each_param([&params](const std::string&, Tensor& t) {
        params.push_back(&t);
    });

    // Adam state
    std::vector<std::vector<double>> m(params.size()), v(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        m[i].assign(static_cast<size_t>(params[i]->numel()), 0.0);
        v[i].assign(static_cast<size_t>(params[i]->numel()), 0.0);
    }
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;
    int64_t step = 0;

    Rng rng(cfg.seed);
    PatienceScheduler sched(cfg.lr, cfg.lr_factor, cfg.lr_reduce_patience,
                            cfg.early_stop_patience, cfg.improve_eps);

    TrainHistory hist;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<Tensor> best_snap = model.snapshot_weights();
    hist.best_epoch = 0;

    std::vector<int> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const double lr_epoch = sched.lr();
        rng.shuffle(order);
        double train_loss = 0.0;
        int64_t seen = 0;
        try {
            for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch_size)) {
                const size_t to = std::min(order.size(), at + static_cast<size_t>(cfg.batch_size));
                Batch b = make_batch(train_set, order, at, to);
                Tape tape;
                ForwardTrace trace = forward(model, tape, b.images);
                Tensor loss = model_loss(tape, model, trace, b.targets, cfg.loss_kind);
                GradMap grads = tape.backward(loss);

                ++step;
                const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
                const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
                for (size_t i = 0; i < params.size(); ++i) {
                    auto it = grads.find(trace.param_nodes[i]);
                    const double* g = it != grads.end() ? it->second.ptr() : nullptr;
                    Tensor& w = *params[i];
                    for (int64_t e = 0; e < w.numel(); ++e) {
                        const double ge = g ? g[e] : 0.0;
                        m[i][static_cast<size_t>(e)] =
                            kBeta1 * m[i][static_cast<size_t>(e)] + (1.0 - kBeta1) * ge;
                        v[i][static_cast<size_t>(e)] =
                            kBeta2 * v[i][static_cast<size_t>(e)] + (1.0 - kBeta2) * ge * ge;
                        const double mhat = m[i][static_cast<size_t>(e)] / c1;
                        const double vhat = v[i][static_cast<size_t>(e)] / c2;
                        w[e] -= lr_epoch * mhat / (std::sqrt(vhat) + kAdamEps);
                    }
                }
                train_loss += loss.scalar() * static_cast<double>(to - at);
                seen += static_cast<int64_t>(to - at);
            }

            // validation pass: composite loss plus dice on hard masks
            double val_loss = 0.0;
            double val_dice = 0.0;
            const int K = model.cfg.class_count;
            for (const Sample& smp : val_set) {
                Tensor img = smp.image;
                img.dims = {1, smp.image.dim(0), smp.image.dim(1), smp.image.dim(2)};
                Tensor tgt = smp.mask;
                tgt.dims = {1, smp.mask.dim(0), smp.mask.dim(1)};
                Tape tape(false);
                ForwardTrace trace = forward(model, tape, img);
                val_loss += model_loss(tape, model, trace, tgt, cfg.loss_kind).scalar();

                Tensor probs = ops::softmax(tape, trace.final_logits);
                const int H = probs.dim(2), W = probs.dim(3);
                const int64_t hw = static_cast<int64_t>(H) * W;
                Tensor mask = Tensor::zeros({H, W});
                for (int64_t p = 0; p < hw; ++p) {
                    int best = 0;
                    double bv = probs[p];
                    for (int k = 1; k < K; ++k) {
                        if (probs[k * hw + p] > bv) { bv = probs[k * hw + p]; best = k; }
                    }
                    mask[p] = best;
                }
                double d = 0.0;
                for (int c = 1; c < K; ++c) d += dice_score(mask, smp.mask, c);
                val_dice += d / (K - 1);
            }
            val_loss /= static_cast<double>(val_set.size());
            val_dice /= static_cast<double>(val_set.size());

            hist.epochs.push_back({train_loss / static_cast<double>(seen), val_loss,
                                   val_dice, lr_epoch});
            hist.stop_epoch = epoch;

            if (val_loss < best_val) {
                best_val = val_loss;
                best_snap = model.snapshot_weights();
                hist.best_epoch = epoch;
            }
            if (!sched.observe(val_loss)) break;
        } catch (const NonFiniteError& e) {
            throw NonFiniteError("training diverged at epoch " + std::to_string(epoch) +
                                 ": " + e.what());
        }
    }

    model.restore_weights(best_snap);
    return hist;
}

std::string format_mean_std_percent(double mean01, double std01) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f ± %.2f", mean01 * 100.0, std01 * 100.0);
    return buf;
}

CrossValResult cross_validate(const ModelConfig& cfg_model, const TrainConfig& cfg_train,
                              const std::vector<Sample>& dataset, const FoldPlan& plan) {
    require(plan.ids.size() == dataset.size(), "cross_validate: plan does not cover dataset");

    CrossValResult res;
    for (int f = 0; f < plan.k; ++f) {
        std::vector<Sample> tr, va;
        for (int id : plan.other_ids(f)) tr.push_back(dataset[static_cast<size_t>(id)]);
        for (int id : plan.fold_ids(f)) va.push_back(dataset[static_cast<size_t>(id)]);
        ModelGraph model = build_model(cfg_model);
        train(model, tr, va, cfg_train);
        res.fold_dice.push_back(evaluate_dice(model, va));
    }
    double mean = 0.0;
    for (double d : res.fold_dice) mean += d;
    mean /= static_cast<double>(res.fold_dice.size());
    double sd = 0.0;
    if (res.fold_dice.size() > 1) {
        for (double d : res.fold_dice) sd += (d - mean) * (d - mean);
        sd = std::sqrt(sd / static_cast<double>(res.fold_dice.size() - 1));
    }
    res.mean = mean;
    res.stdev = sd;
    res.formatted = format_mean_std_percent(mean, sd);
    return res;
}

} // namespace eunet
