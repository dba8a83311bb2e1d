#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "eunet/data_io.hpp"
#include "eunet/explain.hpp"
#include "eunet/harness.hpp"
#include "eunet/uncertainty.hpp"

namespace py = pybind11;
using namespace eunet;

namespace {

using NpArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<double> map_to_np(const PixelMap& m) {
    py::array_t<double> out({m.height, m.width});
    std::copy(m.values.begin(), m.values.end(), out.mutable_data());
    return out;
}

PixelMap np_to_map(const NpArray& arr, MapKind kind) {
    if (arr.ndim() != 2) throw ContractViolation("expected a 2-D array");
    PixelMap m(static_cast<int>(arr.shape(0)), static_cast<int>(arr.shape(1)), kind);
    std::copy(arr.data(), arr.data() + arr.size(), m.values.begin());
    return m;
}

// [H,W] -> [1,1,H,W]; [C,H,W] -> [1,C,H,W]
Tensor image_to_tensor(const NpArray& arr) {
    if (arr.ndim() == 2) {
        Tensor t = Tensor::zeros({1, 1, static_cast<int>(arr.shape(0)),
                                  static_cast<int>(arr.shape(1))});
        std::copy(arr.data(), arr.data() + arr.size(), t.data->begin());
        return t;
    }
    if (arr.ndim() == 3) {
        Tensor t = Tensor::zeros({1, static_cast<int>(arr.shape(0)),
                                  static_cast<int>(arr.shape(1)),
                                  static_cast<int>(arr.shape(2))});
        std::copy(arr.data(), arr.data() + arr.size(), t.data->begin());
        return t;
    }
    throw ContractViolation("expected a [H,W] or [C,H,W] image array");
}

py::array_t<double> tensor_to_np(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.dims.begin(), t.dims.end());
    py::array_t<double> out(shape);
    std::copy(t.data->begin(), t.data->end(), out.mutable_data());
    return out;
}

Tensor mask_to_tensor(const NpArray& arr) {
    if (arr.ndim() != 2) throw ContractViolation("expected a 2-D mask array");
    Tensor t = Tensor::zeros({static_cast<int>(arr.shape(0)), static_cast<int>(arr.shape(1))});
    std::copy(arr.data(), arr.data() + arr.size(), t.data->begin());
    return t;
}

std::vector<const ModelGraph*> member_ptrs(const py::sequence& models) {
    std::vector<const ModelGraph*> out;
    for (const auto& item : models) out.push_back(item.cast<const ModelGraph*>());
    return out;
}

} // namespace

PYBIND11_MODULE(_eunet, m) {
    m.doc() = "U-Net family segmentation with MHEX+ saliency and "
              "gradient-consistency uncertainty";

    py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
    py::register_exception<NonFiniteError>(m, "NonFiniteError", PyExc_ArithmeticError);
    py::register_exception<ParseError>(m, "FileParseError", PyExc_ValueError);

    py::enum_<Backbone>(m, "Backbone")
        .value("unet", Backbone::unet)
        .value("unetpp", Backbone::unetpp);

    py::enum_<LossKind>(m, "LossKind").value("ce", LossKind::ce).value("dice", LossKind::dice);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init([](Backbone backbone, bool with_mhex, int in_channels, int class_count,
                         int base_width, int depth, int mhex_hidden, uint64_t seed) {
                 ModelConfig c;
                 c.backbone = backbone;
                 c.with_mhex = with_mhex;
                 c.in_channels = in_channels;
                 c.class_count = class_count;
                 c.base_width = base_width;
                 c.depth = depth;
                 c.mhex_hidden = mhex_hidden;
                 c.seed = seed;
                 return c;
             }),
             py::arg("backbone") = Backbone::unet, py::arg("with_mhex") = true,
             py::arg("in_channels") = 1, py::arg("class_count") = 2,
             py::arg("base_width") = 8, py::arg("depth") = 3, py::arg("mhex_hidden") = 16,
             py::arg("seed") = 0)
        .def_readwrite("backbone", &ModelConfig::backbone)
        .def_readwrite("with_mhex", &ModelConfig::with_mhex)
        .def_readwrite("in_channels", &ModelConfig::in_channels)
        .def_readwrite("class_count", &ModelConfig::class_count)
        .def_readwrite("base_width", &ModelConfig::base_width)
        .def_readwrite("depth", &ModelConfig::depth)
        .def_readwrite("mhex_hidden", &ModelConfig::mhex_hidden)
        .def_readwrite("seed", &ModelConfig::seed);

    py::class_<ModelGraph>(m, "Model")
        .def_property_readonly("config", [](const ModelGraph& g) { return g.cfg; })
        .def_property_readonly("decoder_stages", &ModelGraph::decoder_stages)
        .def("mhex_weights", [](const ModelGraph& g, int stage) {
            require(stage >= 0 && stage < static_cast<int>(g.mhex.size()),
                    "stage out of range");
            const MhexBlock& b = g.mhex[static_cast<size_t>(stage)];
            py::array_t<double> c1({b.hidden_width, b.in_channels});
            std::copy(b.conv1_weight.data->begin(), b.conv1_weight.data->end(),
                      c1.mutable_data());
            py::array_t<double> c2({b.class_count, b.hidden_width});
            std::copy(b.conv2_weight.data->begin(), b.conv2_weight.data->end(),
                      c2.mutable_data());
            return py::make_tuple(c1, c2);
        }, py::arg("stage"));

    m.def("build_model", &build_model, py::arg("config"));

    m.def("param_count", [](const ModelGraph& g) {
        ParamCount pc = param_count(g);
        py::dict d;
        d["total"] = pc.total;
        d["mhex_only"] = pc.mhex_only;
        return d;
    });

    m.def("predict", [](const ModelGraph& g, const NpArray& image) {
        Prediction p = predict(g, image_to_tensor(image));
        py::dict d;
        d["mask"] = tensor_to_np(p.mask);
        d["confidence"] = map_to_np(p.confidence);
        d["probs"] = tensor_to_np(p.probs);
        return d;
    }, py::arg("model"), py::arg("image"));

    py::class_<SyntheticConfig>(m, "SyntheticConfig")
        .def(py::init([](int image_size, int sample_count, double noise_std,
                         double boundary_blur_px, uint64_t seed) {
                 SyntheticConfig c;
                 c.image_size = image_size;
                 c.sample_count = sample_count;
                 c.noise_std = noise_std;
                 c.boundary_blur_px = boundary_blur_px;
                 c.seed = seed;
                 return c;
             }),
             py::arg("image_size") = 64, py::arg("sample_count") = 32,
             py::arg("noise_std") = 0.15, py::arg("boundary_blur_px") = 1.5,
             py::arg("seed") = 0)
        .def_readwrite("image_size", &SyntheticConfig::image_size)
        .def_readwrite("sample_count", &SyntheticConfig::sample_count)
        .def_readwrite("noise_std", &SyntheticConfig::noise_std)
        .def_readwrite("boundary_blur_px", &SyntheticConfig::boundary_blur_px)
        .def_readwrite("seed", &SyntheticConfig::seed);

    py::class_<Sample>(m, "Sample")
        .def_property_readonly("image", [](const Sample& s) { return tensor_to_np(s.image); })
        .def_property_readonly("mask", [](const Sample& s) { return tensor_to_np(s.mask); })
        .def_readonly("id", &Sample::id);

    m.def("generate_synthetic", &generate_synthetic, py::arg("config"));

    m.def("boundary_band", [](const NpArray& mask, double radius) {
        std::vector<uint8_t> band = boundary_band(mask_to_tensor(mask), radius);
        py::array_t<uint8_t> out({static_cast<py::ssize_t>(mask.shape(0)),
                                  static_cast<py::ssize_t>(mask.shape(1))});
        std::copy(band.begin(), band.end(), out.mutable_data());
        return out;
    }, py::arg("mask"), py::arg("radius"));

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init([](int max_epochs, int early_stop_patience, int lr_reduce_patience,
                         double lr, double lr_factor, int batch_size, LossKind loss_kind,
                         uint64_t seed) {
                 TrainConfig c;
                 c.max_epochs = max_epochs;
                 c.early_stop_patience = early_stop_patience;
                 c.lr_reduce_patience = lr_reduce_patience;
                 c.lr = lr;
                 c.lr_factor = lr_factor;
                 c.batch_size = batch_size;
                 c.loss_kind = loss_kind;
                 c.seed = seed;
                 return c;
             }),
             py::arg("max_epochs") = 50, py::arg("early_stop_patience") = 10,
             py::arg("lr_reduce_patience") = 5, py::arg("lr") = 1e-3,
             py::arg("lr_factor") = 0.5, py::arg("batch_size") = 4,
             py::arg("loss_kind") = LossKind::ce, py::arg("seed") = 0)
        .def_readwrite("max_epochs", &TrainConfig::max_epochs)
        .def_readwrite("lr", &TrainConfig::lr)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("loss_kind", &TrainConfig::loss_kind)
        .def_readwrite("seed", &TrainConfig::seed);

    py::class_<EpochStats>(m, "EpochStats")
        .def_readonly("train_loss", &EpochStats::train_loss)
        .def_readonly("val_loss", &EpochStats::val_loss)
        .def_readonly("val_dice", &EpochStats::val_dice)
        .def_readonly("lr", &EpochStats::lr);

    py::class_<TrainHistory>(m, "TrainHistory")
        .def_readonly("epochs", &TrainHistory::epochs)
        .def_readonly("stop_epoch", &TrainHistory::stop_epoch)
        .def_readonly("best_epoch", &TrainHistory::best_epoch)
        .def("to_csv", &TrainHistory::to_csv);

    m.def("train", &train, py::arg("model"), py::arg("train_set"), py::arg("val_set"),
          py::arg("config"));

    m.def("dice_score", [](const NpArray& pred, const NpArray& truth, int cls) {
        return dice_score(mask_to_tensor(pred), mask_to_tensor(truth), cls);
    }, py::arg("pred_mask"), py::arg("true_mask"), py::arg("cls") = 1);

    m.def("save_checkpoint", &save_checkpoint, py::arg("model"), py::arg("path"));
    m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

    // --- explainability ---
    m.def("equivalent_kernel", [](const ModelGraph& g, int stage) {
        require(stage >= 0 && stage < static_cast<int>(g.mhex.size()), "stage out of range");
        SalienceKernel sk = equivalent_kernel(g.mhex[static_cast<size_t>(stage)], stage);
        const int K = sk.w_equiv.dim(0), cin = sk.w_equiv.dim(1);
        py::array_t<double> out({K, cin});
        std::copy(sk.w_equiv.data->begin(), sk.w_equiv.data->end(), out.mutable_data());
        return out;
    }, py::arg("model"), py::arg("stage"));

    m.def("mhex_cam", [](const ModelGraph& g, const NpArray& image, int cls, int stage) {
        return map_to_np(mhex_cam_for_stage(g, image_to_tensor(image), cls, stage));
    }, py::arg("model"), py::arg("image"), py::arg("cls"), py::arg("stage"));

    m.def("multi_stage_cam", [](const ModelGraph& g, const NpArray& image, int cls) {
        return map_to_np(multi_stage_cam(g, image_to_tensor(image), cls));
    }, py::arg("model"), py::arg("image"), py::arg("cls"));

    m.def("grad_cam", [](const ModelGraph& g, const NpArray& image, int cls, int stage) {
        GradCamResult r = grad_cam(g, image_to_tensor(image), cls, stage);
        return py::make_tuple(map_to_np(r.map), r.zero_gradient);
    }, py::arg("model"), py::arg("image"), py::arg("cls"), py::arg("stage"));

    // --- uncertainty ---
    py::class_<UncertaintyConfig>(m, "UncertaintyConfig")
        .def(py::init([](double epsilon, bool normalize, int stride) {
                 UncertaintyConfig c;
                 c.epsilon = epsilon;
                 c.normalize = normalize;
                 c.stride = stride;
                 return c;
             }),
             py::arg("epsilon") = 1e-8, py::arg("normalize") = true, py::arg("stride") = 1)
        .def_readwrite("epsilon", &UncertaintyConfig::epsilon)
        .def_readwrite("normalize", &UncertaintyConfig::normalize)
        .def_readwrite("stride", &UncertaintyConfig::stride);

    m.def("collaboration_map", [](const ModelGraph& g, const NpArray& image,
                                  const UncertaintyConfig& cfg) {
        CollabResult r = collaboration_map(g, image_to_tensor(image), cfg);
        py::dict d;
        d["map"] = map_to_np(r.map);
        d["zero_norm_pairs"] = r.zero_norm_pairs;
        d["raw_min"] = r.raw_min;
        d["raw_max"] = r.raw_max;
        return d;
    }, py::arg("model"), py::arg("image"), py::arg("config") = UncertaintyConfig{});

    m.def("ensemble_stats", [](const py::sequence& models, const NpArray& image) {
        EnsembleMaps em = ensemble_stats(member_ptrs(models), image_to_tensor(image));
        py::list mean;
        for (const PixelMap& mp : em.mean_prob) mean.append(map_to_np(mp));
        py::dict d;
        d["mean_prob"] = mean;
        d["variance"] = map_to_np(em.variance);
        d["entropy"] = map_to_np(em.entropy);
        d["member_count"] = em.member_count;
        return d;
    }, py::arg("models"), py::arg("image"));

    py::class_<AgreementReport>(m, "AgreementReport")
        .def_readonly("iou", &AgreementReport::iou)
        .def_readonly("dice", &AgreementReport::dice)
        .def_readonly("pearson_r", &AgreementReport::pearson_r)
        .def_readonly("p_value", &AgreementReport::p_value)
        .def_readonly("threshold_used_a", &AgreementReport::threshold_used_a)
        .def_readonly("threshold_used_b", &AgreementReport::threshold_used_b)
        .def_readonly("degenerate", &AgreementReport::degenerate);

    m.def("agreement_metrics", [](const NpArray& a, const NpArray& b) {
        return agreement_metrics(np_to_map(a, MapKind::uncertainty),
                                 np_to_map(b, MapKind::uncertainty));
    }, py::arg("map_a"), py::arg("map_b"));

    // --- file formats ---
    m.def("write_pgm", [](const NpArray& arr, const std::string& path) {
        write_pgm(np_to_map(arr, MapKind::cam), path);
    }, py::arg("map"), py::arg("path"));
    m.def("read_pgm", [](const std::string& path) { return map_to_np(read_pgm(path)); },
          py::arg("path"));
}
