#pragma once

#include <vector>

#include "eunet/models.hpp"
#include "eunet/pixel_map.hpp"

namespace eunet {

struct UncertaintyConfig {
    // Cosine denominator guard. Beyond numerical hygiene this is the
    // confident-pixel suppressor: once a pixel's pair gradients shrink below
    // ~sqrt(epsilon) the cosine collapses to 0, so only pixels with real
    // gradient mass keep a signal. Scale it to the model's gradient range
    // (lightly trained desk-scale models want a much larger value than
    // fully saturated ones).
    double epsilon = 1e-8;
    bool normalize = true;  // U = (1 + S/(L-1))/2 in [0,1], high = uncertain
    int stride = 1;         // pixel subsampling; computed values fill each block
    // The gradient anchor is fixed: both gradients of a pair are taken w.r.t.
    // the C1 of the pair's first-executed block, the one parameter that lies
    // on both loss paths via the residual merge.

    void validate() const { require(epsilon > 0.0 && stride >= 1, "invalid UncertaintyConfig"); }
};

struct CollabResult {
    PixelMap map;              // U per pixel
    long zero_norm_pairs = 0;  // pairs where a gradient vanished (cosine -> 0)
    double raw_min = 0.0;      // range of the raw cosine sum S
    double raw_max = 0.0;
};

// Per-pixel gradient pair for one adjacent block pair; feeds the cosine
// aggregation. Exposed so the aggregation can be driven by hand-built
// gradients in tests.
struct PixelGradPair {
    std::vector<double> g_lo;  // d(loss of block l) / d C1_l
    std::vector<double> g_hi;  // d(loss of block l+1) / d C1_l
};

// cosine with the epsilon guard; a zero-norm side yields exactly 0
double guarded_cosine(const std::vector<double>& a, const std::vector<double>& b,
                      double epsilon, bool* zero_norm = nullptr);

// S -> U for one pixel given L-1 pair cosines
double collab_value(const std::vector<double>& pair_cosines, bool normalize);

// Collaboration-gradient uncertainty: for each pixel, per-pixel CE losses of
// adjacent deep-prediction heads (full-resolution-upsampled, scored against
// the model's own predicted class) are differentiated w.r.t. the shared C1
// anchor; the summed gradient cosines become the uncertainty value.
CollabResult collaboration_map(const ModelGraph& model, const Tensor& image,
                               const UncertaintyConfig& cfg);

struct EnsembleMaps {
    std::vector<PixelMap> mean_prob;  // one per class
    PixelMap variance;                // foreground class for K=2, class mean otherwise
    PixelMap entropy;                 // of the mean distribution, natural log
    int member_count = 0;
};

EnsembleMaps ensemble_stats(const std::vector<const ModelGraph*>& members,
                            const Tensor& image);

struct AgreementReport {
    double iou = 0.0;
    double dice = 0.0;
    double pearson_r = 0.0;
    double p_value = 1.0;
    double threshold_used_a = 0.0;
    double threshold_used_b = 0.0;
    bool degenerate = false;  // a constant map made r undefined (reported 0)
};

struct OtsuResult {
    double threshold = 0.0;
    int bin = 0;                 // foreground = histogram bin > this
    std::vector<uint8_t> mask;
};

// 256-bin Otsu over the map's own min-max range
OtsuResult otsu_binarize(const PixelMap& m);

// IoU/Dice on Otsu-binarized masks, Pearson on raw values, p-value from a
// seeded two-sided permutation test (1000 shuffles, seed 0).
AgreementReport agreement_metrics(const PixelMap& a, const PixelMap& b);

struct ExperimentRow {
    std::string method;  // "entropy" | "variance"
    int sample_id = 0;
    AgreementReport report;
};

struct ExperimentSummary {
    std::string method;
    double iou_mean = 0, iou_std = 0;
    double dice_mean = 0, dice_std = 0;
    double r_mean = 0, r_std = 0;
    double p_mean = 0;
};

struct Sample;  // data_io

struct UncertaintyExperiment {
    std::vector<ExperimentRow> rows;
    std::vector<ExperimentSummary> summary;  // entropy row, variance row
};

UncertaintyExperiment uncertainty_experiment(
    const std::vector<const ModelGraph*>& ensemble, const ModelGraph& eu_model,
    const std::vector<Sample>& dataset, int sample_count,
    const UncertaintyConfig& cfg);

// mean ± sample-std aggregation per method, one summary row per method
std::vector<ExperimentSummary> summarize_experiment(const std::vector<ExperimentRow>& rows);

// agreement-table text: method rows against IoU / Dice / Pearson(p) columns
std::string experiment_summary_csv(const std::vector<ExperimentSummary>& summary);

} // namespace eunet
