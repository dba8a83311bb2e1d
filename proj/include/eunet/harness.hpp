#pragma once

#include <string>
#include <vector>

#include "eunet/data_io.hpp"
#include "eunet/models.hpp"

namespace eunet {

struct TrainConfig {
    int max_epochs = 50;
    int early_stop_patience = 10;
    int lr_reduce_patience = 5;
    double lr = 1e-3;
    double lr_factor = 0.5;
    int batch_size = 4;
    LossKind loss_kind = LossKind::ce;
    uint64_t seed = 0;
    double improve_eps = 1e-6;  // absolute val-loss improvement threshold

    void validate() const;
};

struct EpochStats {
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_dice = 0.0;
    double lr = 0.0;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    int stop_epoch = 0;  // 1-based count of epochs actually run
    int best_epoch = 0;  // 1-based epoch whose weights were returned

    std::string to_csv() const;  // epoch,train_loss,val_loss,val_dice,lr
};

// Patience bookkeeping for LR reduction and early stopping, isolated so the
// schedule is testable without running real training.
class PatienceScheduler {
public:
    PatienceScheduler(double lr, double lr_factor, int lr_patience,
                      int stop_patience, double improve_eps);

    // feed one epoch's val loss; returns false when training should stop
    bool observe(double val_loss);

    double lr() const { return lr_; }
    bool improved() const { return improved_; }

private:
    double lr_, lr_factor_, best_, improve_eps_;
    int lr_patience_, stop_patience_;
    int lr_streak_ = 0, stop_streak_ = 0;
    bool improved_ = false;
    bool seen_any_ = false;
};

// Adam steps on the model, the paper's schedule (LR halving and early stop
// on stalled val loss), best-epoch weight restore. Mutates `model` in place
// and leaves it holding the best weights.
TrainHistory train(ModelGraph& model, const std::vector<Sample>& train_set,
                   const std::vector<Sample>& val_set, const TrainConfig& cfg);

// 2|P∩T| / (|P|+|T|) for one class; 1.0 when both masks are empty
double dice_score(const Tensor& pred_mask, const Tensor& true_mask, int cls);

// mean dice over foreground classes for one model on a set
double evaluate_dice(const ModelGraph& model, const std::vector<Sample>& set);

struct CrossValResult {
    std::vector<double> fold_dice;
    double mean = 0.0;
    double stdev = 0.0;           // sample standard deviation
    std::string formatted;        // "86.72 ± 2.62" percent style
};

CrossValResult cross_validate(const ModelConfig& cfg_model, const TrainConfig& cfg_train,
                              const std::vector<Sample>& dataset, const FoldPlan& plan);

std::string format_mean_std_percent(double mean01, double std01);

} // namespace eunet
