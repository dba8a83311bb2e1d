#include "eunet/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "eunet/data_io.hpp"
#include "eunet/rng.hpp"
#include "eunet/util.hpp"

namespace eunet {

double guarded_cosine(const std::vector<double>& a, const std::vector<double>& b,
                      double epsilon, bool* zero_norm) {
    require(a.size() == b.size(), "guarded_cosine: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (zero_norm) *zero_norm = (na == 0.0 || nb == 0.0);
    return dot / (std::sqrt(na) * std::sqrt(nb) + epsilon);
}

// Normalized form: U = (1 + S/(L-1)) / 2, an ascending affine map of the raw
// cosine sum. Strong aligned pair gradients (the collaboration signal of
// contested pixels) land near 1; epsilon-suppressed or orthogonal gradients
// (confident pixels) land near 1/2; anti-aligned pairs near 0.
double collab_value(const std::vector<double>& pair_cosines, bool normalize) {
    double s = 0.0;
    for (double c : pair_cosines) s += c;
    if (!normalize) return s;
    return (1.0 + s / static_cast<double>(pair_cosines.size())) / 2.0;
}

namespace {

std::vector<double> tensor_to_vec(const Tensor& t) {
    return std::vector<double>(t.data->begin(), t.data->end());
}

} // namespace

CollabResult collaboration_map(const ModelGraph& model, const Tensor& image,
                               const UncertaintyConfig& cfg) {
    cfg.validate();
    const int L = model.decoder_stages();
    require(L >= 2, "collaboration_map: need at least 2 decoder stages");
    require(model.cfg.with_mhex, "collaboration_map: model has no MHEX+ blocks");
    require(image.dim(0) == 1, "collaboration_map: single-image analysis only");

    Tape tape;
    ForwardTrace trace = forward(model, tape, image);
    const int K = model.cfg.class_count;
    const int H = trace.final_logits.dim(2), W = trace.final_logits.dim(3);
    const int64_t hw = static_cast<int64_t>(H) * W;

    // the model's own predicted class is the per-pixel CE target
    std::vector<int> pred(static_cast<size_t>(hw));
    for (int64_t p = 0; p < hw; ++p) {
        int best = 0;
        double bv = trace.final_logits[p];
        for (int k = 1; k < K; ++k) {
            const double v = trace.final_logits[k * hw + p];
            if (v > bv) { bv = v; best = k; }
        }
        pred[static_cast<size_t>(p)] = best;
    }

    // native-resolution softmax per head; the per-pixel CE gradient seed is
    // softmax - onehot at the head pixel the full-resolution pixel maps to
    std::vector<std::vector<double>> head_probs(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
        const Tensor& dp = trace.deep_preds[static_cast<size_t>(l)];
        const int64_t nhw = static_cast<int64_t>(dp.dim(2)) * dp.dim(3);
        std::vector<double>& pr = head_probs[static_cast<size_t>(l)];
        pr.resize(static_cast<size_t>(K * nhw));
        for (int64_t p = 0; p < nhw; ++p) {
            double mx = dp[p];
            for (int k = 1; k < K; ++k) mx = std::max(mx, dp[k * nhw + p]);
            double z = 0.0;
            for (int k = 0; k < K; ++k) {
                const double e = std::exp(dp[k * nhw + p] - mx);
                pr[static_cast<size_t>(k * nhw + p)] = e;
                z += e;
            }
            for (int k = 0; k < K; ++k) pr[static_cast<size_t>(k * nhw + p)] /= z;
        }
    }

    // strided pixel grid; each computed value fills its stride block
    std::vector<std::pair<int, int>> pixels;
    for (int i = 0; i < H; i += cfg.stride) {
        for (int j = 0; j < W; j += cfg.stride) pixels.emplace_back(i, j);
    }

    CollabResult res;
    res.map = PixelMap(H, W, MapKind::uncertainty);
    std::vector<double> raw(pixels.size(), 0.0);
    std::vector<long> zero_counts(pixels.size(), 0);

    parallel_for(static_cast<int64_t>(pixels.size()), [&](int64_t px) {
        const auto [pi, pj] = pixels[static_cast<size_t>(px)];
        const int t = pred[static_cast<size_t>(static_cast<int64_t>(pi) * W + pj)];

        // gradients of each head's pixel loss w.r.t. the pair anchors
        std::vector<std::vector<double>> g_own(static_cast<size_t>(L));
        std::vector<std::vector<double>> g_next(static_cast<size_t>(L));
        for (int l = 0; l < L; ++l) {
            const Tensor& dp = trace.deep_preds[static_cast<size_t>(l)];
            const int f = trace.upsample_factors[static_cast<size_t>(l)];
            const int nh = dp.dim(2), nw = dp.dim(3);
            const int64_t nhw = static_cast<int64_t>(nh) * nw;
            const int qi = pi / f, qj = pj / f;
            Tensor seed = Tensor::zeros(dp.dims);
            const std::vector<double>& pr = head_probs[static_cast<size_t>(l)];
            for (int k = 0; k < K; ++k) {
                const int64_t at = k * nhw + static_cast<int64_t>(qi) * nw + qj;
                seed[at] = pr[static_cast<size_t>(at)] - (k == t ? 1.0 : 0.0);
            }
            std::vector<int> targets;
            if (l >= 1) targets.push_back(trace.mhex_conv1_nodes[static_cast<size_t>(l - 1)]);
            if (l <= L - 2) targets.push_back(trace.mhex_conv1_nodes[static_cast<size_t>(l)]);
            GradMap gm = tape.backward_from(dp, seed, targets);
            auto grab = [&](int node) {
                auto it = gm.find(node);
                const MhexBlock& anchor = model.mhex[static_cast<size_t>(
                    node == trace.mhex_conv1_nodes[static_cast<size_t>(l)] ? l : l - 1)];
                if (it == gm.end()) {
                    return std::vector<double>(
                        static_cast<size_t>(anchor.conv1_weight.numel()), 0.0);
                }
                return tensor_to_vec(it->second);
            };
            if (l <= L - 2) {
                g_own[static_cast<size_t>(l)] =
                    grab(trace.mhex_conv1_nodes[static_cast<size_t>(l)]);
            }
            if (l >= 1) {
                g_next[static_cast<size_t>(l - 1)] =
                    grab(trace.mhex_conv1_nodes[static_cast<size_t>(l - 1)]);
            }
        }

        std::vector<double> cosines;
        long zeros = 0;
        for (int l = 0; l + 1 < L; ++l) {
            bool zn = false;
            cosines.push_back(guarded_cosine(g_own[static_cast<size_t>(l)],
                                             g_next[static_cast<size_t>(l)],
                                             cfg.epsilon, &zn));
            if (zn) ++zeros;
        }
        raw[static_cast<size_t>(px)] = collab_value(cosines, false);
        zero_counts[static_cast<size_t>(px)] = zeros;
    });

    res.raw_min = raw.empty() ? 0.0 : raw[0];
    res.raw_max = res.raw_min;
    for (size_t px = 0; px < pixels.size(); ++px) {
        res.raw_min = std::min(res.raw_min, raw[px]);
        res.raw_max = std::max(res.raw_max, raw[px]);
        res.zero_norm_pairs += zero_counts[px];
        const double u = cfg.normalize
                             ? (1.0 + raw[px] / static_cast<double>(L - 1)) / 2.0
                             : raw[px];
        const auto [pi, pj] = pixels[px];
        for (int i = pi; i < std::min(H, pi + cfg.stride); ++i) {
            for (int j = pj; j < std::min(W, pj + cfg.stride); ++j) {
                res.map.at(i, j) = u;
            }
        }
    }
    return res;
}

EnsembleMaps ensemble_stats(const std::vector<const ModelGraph*>& members,
                            const Tensor& image) {
    require(members.size() >= 2, "ensemble_stats: need at least 2 members");
    const int K = members[0]->cfg.class_count;
    for (const ModelGraph* m : members) {
        require(m->cfg.class_count == K, "ensemble_stats: inconsistent class count");
        require(m->cfg.in_channels == members[0]->cfg.in_channels,
                "ensemble_stats: inconsistent input channels");
    }
    const int N = static_cast<int>(members.size());
    std::vector<Tensor> probs;
    probs.reserve(members.size());
    for (const ModelGraph* m : members) probs.push_back(predict(*m, image).probs);

    const int H = probs[0].dim(1), W = probs[0].dim(2);
    const int64_t hw = static_cast<int64_t>(H) * W;

    EnsembleMaps em;
    em.member_count = N;
    for (int k = 0; k < K; ++k) em.mean_prob.emplace_back(H, W, MapKind::mean_prob);
    em.variance = PixelMap(H, W, MapKind::variance);
    em.entropy = PixelMap(H, W, MapKind::entropy);

    // squared deviations are rounded to memory before summation so that the
    // accumulation stays commutative in member order
    std::vector<double> sq(static_cast<size_t>(N));
    for (int64_t p = 0; p < hw; ++p) {
        for (int k = 0; k < K; ++k) {
            double mean = 0.0;
            for (const Tensor& pm : probs) mean += pm[k * hw + p];
            mean /= N;
            em.mean_prob[static_cast<size_t>(k)].values[static_cast<size_t>(p)] = mean;
        }
        // predictive variance per class, then the K=2 foreground convention
        double var_accum = 0.0;
        double var_fg = 0.0;
        for (int k = 0; k < K; ++k) {
            const double mean =
                em.mean_prob[static_cast<size_t>(k)].values[static_cast<size_t>(p)];
            for (int m = 0; m < N; ++m) {
                const double d = probs[static_cast<size_t>(m)][k * hw + p] - mean;
                sq[static_cast<size_t>(m)] = d * d;
            }
            double v = 0.0;
            for (int m = 0; m < N; ++m) v += sq[static_cast<size_t>(m)];
            v /= N;
            var_accum += v;
            if (k == 1) var_fg = v;
        }
        em.variance.values[static_cast<size_t>(p)] =
            (K == 2) ? var_fg : var_accum / K;
        double h = 0.0;
        for (int k = 0; k < K; ++k) {
            const double mean =
                em.mean_prob[static_cast<size_t>(k)].values[static_cast<size_t>(p)];
            if (mean > 0.0) h -= mean * std::log(mean);
        }
        em.entropy.values[static_cast<size_t>(p)] = h;
    }
    return em;
}

OtsuResult otsu_binarize(const PixelMap& m) {
    OtsuResult r;
    r.mask.assign(m.size(), 0);
    const double lo = m.min(), hi = m.max();
    r.threshold = lo;
    r.bin = 255;
    if (hi <= lo) return r;  // constant map: empty foreground

    constexpr int B = 256;
    std::vector<int64_t> hist(B, 0);
    auto bin_of = [&](double v) {
        int b = static_cast<int>((v - lo) / (hi - lo) * B);
        return std::min(b, B - 1);
    };
    for (double v : m.values) ++hist[static_cast<size_t>(bin_of(v))];

    const double total = static_cast<double>(m.size());
    double sum_all = 0.0;
    for (int b = 0; b < B; ++b) sum_all += b * static_cast<double>(hist[static_cast<size_t>(b)]);

    double w0 = 0.0, sum0 = 0.0, best = -1.0;
    int best_t = B - 1;
    for (int t = 0; t < B - 1; ++t) {
        w0 += static_cast<double>(hist[static_cast<size_t>(t)]);
        if (w0 == 0.0) continue;
        const double w1 = total - w0;
        if (w1 == 0.0) break;
        sum0 += t * static_cast<double>(hist[static_cast<size_t>(t)]);
        const double mu0 = sum0 / w0;
        const double mu1 = (sum_all - sum0) / w1;
        const double between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if (between > best) {
            best = between;
            best_t = t;
        }
    }
    r.bin = best_t;
    r.threshold = lo + (hi - lo) * static_cast<double>(best_t + 1) / B;
    for (size_t i = 0; i < m.size(); ++i) {
        r.mask[i] = bin_of(m.values[i]) > best_t ? 1 : 0;
    }
    return r;
}

AgreementReport agreement_metrics(const PixelMap& a, const PixelMap& b) {
    require(a.height == b.height && a.width == b.width,
            "agreement_metrics: dimension mismatch");
    const size_t n = a.size();
    require(n > 0, "agreement_metrics: empty maps");

    AgreementReport rep;
    OtsuResult oa = otsu_binarize(a);
    OtsuResult ob = otsu_binarize(b);
    rep.threshold_used_a = oa.threshold;
    rep.threshold_used_b = ob.threshold;

    int64_t inter = 0, ca = 0, cb = 0;
    for (size_t i = 0; i < n; ++i) {
        ca += oa.mask[i];
        cb += ob.mask[i];
        inter += (oa.mask[i] & ob.mask[i]);
    }
    const int64_t uni = ca + cb - inter;
    rep.iou = (uni == 0) ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    rep.dice = (ca + cb == 0)
                   ? 1.0
                   : 2.0 * static_cast<double>(inter) / static_cast<double>(ca + cb);

    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ma += a.values[i];
        mb += b.values[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double da = a.values[i] - ma;
        const double db = b.values[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    // a constant map leaves r undefined; min==max catches exact constancy
    // even when the accumulated variance carries rounding residue
    if (va == 0.0 || vb == 0.0 || a.min() == a.max() || b.min() == b.max()) {
        rep.degenerate = true;
        rep.pearson_r = 0.0;
        rep.p_value = 1.0;
        return rep;
    }
    const double denom = std::sqrt(va) * std::sqrt(vb);
    rep.pearson_r = cov / denom;

    // two-sided permutation test, 1000 shuffles, fixed seed
    constexpr int kShuffles = 1000;
    Rng rng(0);
    std::vector<double> perm(b.values.begin(), b.values.end());
    int hits = 0;
    const double robs = std::abs(rep.pearson_r);
    for (int s = 0; s < kShuffles; ++s) {
        rng.shuffle(perm);
        double pc = 0.0;
        for (size_t i = 0; i < n; ++i) pc += (a.values[i] - ma) * (perm[i] - mb);
        if (std::abs(pc / denom) >= robs) ++hits;
    }
    rep.p_value = static_cast<double>(1 + hits) / static_cast<double>(kShuffles + 1);
    return rep;
}

namespace {

void mean_std(const std::vector<double>& xs, double& mean, double& sd) {
    mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    sd = 0.0;
    if (xs.size() > 1) {
        for (double x : xs) sd += (x - mean) * (x - mean);
        sd = std::sqrt(sd / static_cast<double>(xs.size() - 1));
    }
}

} // namespace

UncertaintyExperiment uncertainty_experiment(
    const std::vector<const ModelGraph*>& ensemble, const ModelGraph& eu_model,
    const std::vector<Sample>& dataset, int sample_count,
    const UncertaintyConfig& cfg) {
    require(sample_count > 0 &&
                sample_count <= static_cast<int>(dataset.size()),
            "uncertainty_experiment: sample_count exceeds dataset");

    UncertaintyExperiment ex;
    for (int s = 0; s < sample_count; ++s) {
        const Sample& smp = dataset[static_cast<size_t>(s)];
        Tensor img = smp.image;
        img.dims = {1, smp.image.dim(0), smp.image.dim(1), smp.image.dim(2)};
        PixelMap mu = collaboration_map(eu_model, img, cfg).map;
        EnsembleMaps de = ensemble_stats(ensemble, img);
        ex.rows.push_back({"entropy", smp.id, agreement_metrics(mu, de.entropy)});
        ex.rows.push_back({"variance", smp.id, agreement_metrics(mu, de.variance)});
    }
    ex.summary = summarize_experiment(ex.rows);
    return ex;
}

std::vector<ExperimentSummary> summarize_experiment(const std::vector<ExperimentRow>& rows) {
    std::vector<ExperimentSummary> out;
    for (const std::string& method : {std::string("entropy"), std::string("variance")}) {
        std::vector<double> iou, dice, r, p;
        for (const ExperimentRow& row : rows) {
            if (row.method != method) continue;
            iou.push_back(row.report.iou);
            dice.push_back(row.report.dice);
            r.push_back(row.report.pearson_r);
            p.push_back(row.report.p_value);
        }
        if (iou.empty()) continue;
        ExperimentSummary s;
        s.method = method;
        mean_std(iou, s.iou_mean, s.iou_std);
        mean_std(dice, s.dice_mean, s.dice_std);
        mean_std(r, s.r_mean, s.r_std);
        double psd = 0.0;
        mean_std(p, s.p_mean, psd);
        out.push_back(std::move(s));
    }
    return out;
}

std::string experiment_summary_csv(const std::vector<ExperimentSummary>& summary) {
    std::string out = "method,iou,dice,pearson\n";
    for (const ExperimentSummary& s : summary) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,%.4f ± %.4f,%.4f ± %.4f,%.4f ± %.4f (p=%.4f)\n",
                      s.method.c_str(), s.iou_mean, s.iou_std, s.dice_mean, s.dice_std,
                      s.r_mean, s.r_std, s.p_mean);
        out += buf;
    }
    return out;
}

} // namespace eunet
