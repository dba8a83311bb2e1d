#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "eunet/data_io.hpp"
#include "eunet/explain.hpp"
#include "eunet/harness.hpp"
#include "eunet/run_config.hpp"
#include "eunet/uncertainty.hpp"
#include "eunet/util.hpp"

namespace fs = std::filesystem;
using namespace eunet;

// exit codes: 0 ok, 2 config/input error, 3 training divergence,
// 4 class out of range, 5 structural (missing stages/members)
namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitBadClass = 4;
constexpr int kExitStructural = 5;

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    int seed = -1;
    std::string backbone;
    int mhex = 0;  // CLI11 flag count: >0 --mhex, <0 --no-mhex, 0 unset
    std::string loss;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config_path, "key = value config file");
    cmd->add_option("--out", a.out_dir, "output directory")->required();
    cmd->add_option("--seed", a.seed, "master seed (model, data, training)");
    cmd->add_option("--backbone", a.backbone, "unet | unetpp")
        ->check(CLI::IsMember({"unet", "unetpp"}));
    cmd->add_flag("--mhex,!--no-mhex", a.mhex, "attach MHEX+ blocks");
    cmd->add_option("--loss", a.loss, "ce | dice")->check(CLI::IsMember({"ce", "dice"}));
}

RunConfig resolve_config(const CommonArgs& a) {
    RunConfig cfg;
    if (!a.config_path.empty()) cfg = load_run_config(a.config_path);
    if (a.seed >= 0) cfg.set_seed(static_cast<uint64_t>(a.seed));
    if (!a.backbone.empty()) cfg.apply("backbone", a.backbone);
    if (a.mhex > 0) cfg.model.with_mhex = true;
    if (a.mhex < 0) cfg.model.with_mhex = false;
    if (!a.loss.empty()) cfg.apply("loss", a.loss);
    return cfg;
}

void prepare_out(const RunConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    write_text_file((fs::path(out_dir) / "resolved_config.txt").string(), cfg.serialize());
}

Tensor as_batch(const Sample& s) {
    Tensor img = s.image;
    img.dims = {1, s.image.dim(0), s.image.dim(1), s.image.dim(2)};
    return img;
}

Tensor pgm_as_input(const std::string& path) {
    PixelMap m = read_pgm(path);
    Tensor img = Tensor::zeros({1, 1, m.height, m.width});
    for (size_t i = 0; i < m.values.size(); ++i) img[static_cast<int64_t>(i)] = m.values[i];
    return img;
}

int cmd_train(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    cfg.model.validate();
    cfg.train.validate();
    cfg.data.validate();
    prepare_out(cfg, args.out_dir);

    std::vector<Sample> data = generate_synthetic(cfg.data);
    std::vector<int> ids(data.size());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    FoldPlan plan = kfold(ids, cfg.folds, cfg.seed());
    std::vector<Sample> tr, va;
    for (int id : plan.other_ids(cfg.val_fold)) tr.push_back(data[static_cast<size_t>(id)]);
    for (int id : plan.fold_ids(cfg.val_fold)) va.push_back(data[static_cast<size_t>(id)]);

    ModelGraph model = build_model(cfg.model);
    TrainHistory hist;
    try {
        hist = train(model, tr, va, cfg.train);
    } catch (const NonFiniteError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDiverged;
    }
    save_checkpoint(model, (fs::path(args.out_dir) / "checkpoint.eunc").string());
    write_text_file((fs::path(args.out_dir) / "history.csv").string(), hist.to_csv());
    std::cout << "trained " << hist.stop_epoch << " epochs, best epoch "
              << hist.best_epoch << ", val dice "
              << fmt_double(hist.epochs.back().val_dice) << "\n";
    return kExitOk;
}

int cmd_explain(const CommonArgs& args, const std::string& checkpoint,
                const std::string& image_path, int sample_index, int cls,
                const std::string& stage_sel) {
    RunConfig cfg = resolve_config(args);
    prepare_out(cfg, args.out_dir);

    ModelGraph model = load_checkpoint(checkpoint);
    if (!model.cfg.with_mhex) {
        std::cerr << "error: checkpoint has no MHEX+ blocks; cannot build CAMs\n";
        return kExitStructural;
    }
    if (cls < 0 || cls >= model.cfg.class_count) {
        std::cerr << "error: class " << cls << " out of range [0,"
                  << model.cfg.class_count << ")\n";
        return kExitBadClass;
    }
    Tensor img;
    if (!image_path.empty()) {
        img = pgm_as_input(image_path);
    } else {
        SyntheticConfig dc = cfg.data;
        dc.sample_count = sample_index + 1;
        std::vector<Sample> data = generate_synthetic(dc);
        img = as_batch(data[static_cast<size_t>(sample_index)]);
    }

    const int L = model.decoder_stages();
    std::vector<int> stages;
    if (stage_sel == "all") {
        for (int l = 0; l < L; ++l) stages.push_back(l);
    } else {
        const int s = std::atoi(stage_sel.c_str());
        if (s < 1 || s > L) {
            std::cerr << "error: stage must be 1.." << L << " or 'all'\n";
            return kExitConfig;
        }
        stages.push_back(s - 1);
    }

    for (int l : stages) {
        PixelMap cam = mhex_cam_for_stage(model, img, cls, l);
        PixelMap gc = grad_cam(model, img, cls, l).map;
        const std::string tag = "stage" + std::to_string(l + 1);
        write_pgm(cam.normalized(), (fs::path(args.out_dir) / ("mhex_cam_" + tag + ".pgm")).string());
        write_map_csv(cam, (fs::path(args.out_dir) / ("mhex_cam_" + tag + ".csv")).string());
        write_pgm(gc.normalized(), (fs::path(args.out_dir) / ("grad_cam_" + tag + ".pgm")).string());
        write_map_csv(gc, (fs::path(args.out_dir) / ("grad_cam_" + tag + ".csv")).string());
    }
    PixelMap comp = multi_stage_cam(model, img, cls);
    write_pgm(comp.normalized(), (fs::path(args.out_dir) / "mhex_cam_composite.pgm").string());
    write_map_csv(comp, (fs::path(args.out_dir) / "mhex_cam_composite.csv").string());
    std::cout << "wrote " << stages.size() << " stage pair(s) + composite\n";
    return kExitOk;
}

int cmd_uncert(const CommonArgs& args, const std::vector<std::string>& checkpoints,
               const std::string& mu_checkpoint, const std::string& image_path,
               int samples, const std::string& method) {
    RunConfig cfg = resolve_config(args);
    prepare_out(cfg, args.out_dir);

    const bool want_mu = method == "mhex" || method == "both";
    const bool want_de = method == "ensemble" || method == "both";

    std::vector<ModelGraph> members;
    for (const std::string& p : checkpoints) members.push_back(load_checkpoint(p));
    if (want_de && members.size() < 2) {
        std::cerr << "error: ensemble method needs at least 2 checkpoints\n";
        return kExitStructural;
    }

    ModelGraph mu_model;
    if (want_mu) {
        const std::string path = mu_checkpoint.empty() ? checkpoints.at(0) : mu_checkpoint;
        mu_model = load_checkpoint(path);
        if (!mu_model.cfg.with_mhex || mu_model.decoder_stages() < 2) {
            std::cerr << "error: MU needs an MHEX+ model with at least 2 decoder stages\n";
            return kExitStructural;
        }
    }

    std::vector<Sample> data;
    if (!image_path.empty()) {
        Sample s;
        Tensor img = pgm_as_input(image_path);
        s.image = Tensor::zeros({1, img.dim(2), img.dim(3)});
        for (int64_t i = 0; i < s.image.numel(); ++i) s.image[i] = img[i];
        s.mask = Tensor::zeros({img.dim(2), img.dim(3)});
        s.id = 0;
        data.push_back(std::move(s));
        samples = 1;
    } else {
        SyntheticConfig dc = cfg.data;
        dc.sample_count = std::max(dc.sample_count, samples);
        data = generate_synthetic(dc);
        if (samples <= 0 || samples > static_cast<int>(data.size())) {
            std::cerr << "error: --samples out of range\n";
            return kExitConfig;
        }
    }

    std::vector<const ModelGraph*> member_ptrs;
    for (const ModelGraph& m : members) member_ptrs.push_back(&m);

    auto map_path = [&](const std::string& base, int id, const char* ext) {
        return (fs::path(args.out_dir) / (base + "_" + std::to_string(id) + ext)).string();
    };

    std::string agreement_csv = "method,sample_id,iou,dice,pearson_r,p_value\n";
    std::vector<ExperimentRow> report_rows;
    for (int s = 0; s < samples; ++s) {
        const Sample& smp = data[static_cast<size_t>(s)];
        Tensor img = as_batch(smp);

        PixelMap mu;
        if (want_mu) {
            CollabResult cr = collaboration_map(mu_model, img, cfg.uncert);
            mu = cr.map;
            write_pgm(mu.normalized(), map_path("mu", smp.id, ".pgm"));
            write_map_csv(mu, map_path("mu", smp.id, ".csv"));
        }
        if (want_de) {
            EnsembleMaps de = ensemble_stats(member_ptrs, img);
            write_pgm(de.entropy.normalized(), map_path("de_entropy", smp.id, ".pgm"));
            write_map_csv(de.entropy, map_path("de_entropy", smp.id, ".csv"));
            write_pgm(de.variance.normalized(), map_path("de_variance", smp.id, ".pgm"));
            write_map_csv(de.variance, map_path("de_variance", smp.id, ".csv"));
            const PixelMap& fg = de.mean_prob[static_cast<size_t>(
                std::min(1, static_cast<int>(de.mean_prob.size()) - 1))];
            write_pgm(fg.normalized(), map_path("de_mean", smp.id, ".pgm"));
            if (want_mu) {
                AgreementReport ae = agreement_metrics(mu, de.entropy);
                AgreementReport av = agreement_metrics(mu, de.variance);
                report_rows.push_back({"entropy", smp.id, ae});
                report_rows.push_back({"variance", smp.id, av});
                for (const auto& [name, rep] :
                     {std::pair<const char*, AgreementReport&>{"entropy", ae},
                      std::pair<const char*, AgreementReport&>{"variance", av}}) {
                    agreement_csv += std::string(name) + "," + std::to_string(smp.id) + "," +
                                     fmt_double(rep.iou) + "," + fmt_double(rep.dice) + "," +
                                     fmt_double(rep.pearson_r) + "," +
                                     fmt_double(rep.p_value) + "\n";
                }
            }
        }
    }

    if (want_mu && want_de) {
        write_text_file((fs::path(args.out_dir) / "agreement.csv").string(), agreement_csv);
        write_text_file((fs::path(args.out_dir) / "summary.csv").string(),
                        experiment_summary_csv(summarize_experiment(report_rows)));
    }
    std::cout << "processed " << samples << " sample(s)\n";
    return kExitOk;
}

int cmd_bench_cam(const CommonArgs& args, const std::string& checkpoint,
                  const std::string& sizes_csv) {
    RunConfig cfg = resolve_config(args);
    prepare_out(cfg, args.out_dir);

    ModelGraph model = load_checkpoint(checkpoint);
    std::vector<int> sizes;
    std::stringstream ss(sizes_csv);
    std::string item;
    while (std::getline(ss, item, ',')) sizes.push_back(std::atoi(item.c_str()));

    std::vector<CamBenchRow> rows;
    try {
        rows = cam_benchmark(model, sizes);
    } catch (const ContractViolation& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    std::string csv = "size,mhex_prep_s,gradcam_s\n";
    for (const CamBenchRow& r : rows) {
        csv += std::to_string(r.size) + "," + fmt_double(r.mhex_prep_s) + "," +
               fmt_double(r.gradcam_s) + "\n";
    }
    write_text_file((fs::path(args.out_dir) / "cam_benchmark.csv").string(), csv);
    std::cout << csv;
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"U-Net family segmentation with MHEX+ explainability and "
                 "gradient-consistency uncertainty"};
    app.require_subcommand(1);

    CommonArgs train_args;
    CLI::App* train_cmd = app.add_subcommand("train", "train a model on synthetic data");
    add_common(train_cmd, train_args);

    CommonArgs explain_args;
    std::string ex_checkpoint, ex_image, ex_stage = "all";
    int ex_sample = 0, ex_class = 1;
    CLI::App* explain_cmd = app.add_subcommand("explain", "emit MHEX+ CAM and Grad-CAM maps");
    add_common(explain_cmd, explain_args);
    explain_cmd->add_option("--checkpoint", ex_checkpoint, "model checkpoint")->required();
    explain_cmd->add_option("--image", ex_image, "input image (PGM)");
    explain_cmd->add_option("--sample", ex_sample, "synthetic sample index (when no --image)");
    explain_cmd->add_option("--class", ex_class, "class id");
    explain_cmd->add_option("--stage", ex_stage, "decoder stage 1..L or 'all'");

    CommonArgs uncert_args;
    std::vector<std::string> un_checkpoints;
    std::string un_mu_checkpoint, un_image, un_method = "both";
    int un_samples = 8;
    CLI::App* uncert_cmd = app.add_subcommand("uncert", "uncertainty maps and agreement report");
    add_common(uncert_cmd, uncert_args);
    uncert_cmd->add_option("--checkpoint", un_checkpoints, "ensemble checkpoints")->required();
    uncert_cmd->add_option("--mu-checkpoint", un_mu_checkpoint,
                           "model for the MU map (default: first --checkpoint)");
    uncert_cmd->add_option("--image", un_image, "single input image (PGM)");
    uncert_cmd->add_option("--samples", un_samples, "synthetic sample count");
    uncert_cmd->add_option("--method", un_method, "mhex | ensemble | both")
        ->check(CLI::IsMember({"mhex", "ensemble", "both"}));

    CommonArgs bench_args;
    std::string be_checkpoint, be_sizes = "32,64,128";
    CLI::App* bench_cmd = app.add_subcommand("bench-cam", "CAM preparation cost benchmark");
    add_common(bench_cmd, bench_args);
    bench_cmd->add_option("--checkpoint", be_checkpoint, "model checkpoint")->required();
    bench_cmd->add_option("--sizes", be_sizes, "comma-separated input sizes");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(train_args);
        if (explain_cmd->parsed()) {
            return cmd_explain(explain_args, ex_checkpoint, ex_image, ex_sample, ex_class,
                               ex_stage);
        }
        if (uncert_cmd->parsed()) {
            return cmd_uncert(uncert_args, un_checkpoints, un_mu_checkpoint, un_image,
                              un_samples, un_method);
        }
        if (bench_cmd->parsed()) return cmd_bench_cam(bench_args, be_checkpoint, be_sizes);
    } catch (const ContractViolation& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NonFiniteError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDiverged;
    }
    return kExitConfig;
}
