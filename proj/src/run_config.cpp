#include "eunet/run_config.hpp"

#include <sstream>

namespace eunet {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ContractViolation("config: bad boolean for '" + key + "': " + v);
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const int r = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ContractViolation("config: bad integer for '" + key + "': " + v);
    }
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const double r = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ContractViolation("config: bad real for '" + key + "': " + v);
    }
}

std::string shape_kinds_to_string(const std::vector<ShapeKind>& kinds) {
    std::string out;
    for (ShapeKind k : kinds) {
        if (!out.empty()) out += ",";
        out += k == ShapeKind::disk ? "disk" : (k == ShapeKind::ellipse ? "ellipse" : "blob");
    }
    return out;
}

std::vector<ShapeKind> parse_shape_kinds(const std::string& v) {
    std::vector<ShapeKind> kinds;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item == "disk") kinds.push_back(ShapeKind::disk);
        else if (item == "ellipse") kinds.push_back(ShapeKind::ellipse);
        else if (item == "blob") kinds.push_back(ShapeKind::blob);
        else throw ContractViolation("config: unknown shape kind '" + item + "'");
    }
    require(!kinds.empty(), "config: shape_kinds is empty");
    return kinds;
}

} // namespace

void RunConfig::set_seed(uint64_t s) {
    model.seed = s;
    train.seed = s;
    data.seed = s;
}

void RunConfig::apply(const std::string& key, const std::string& value) {
    if (key == "backbone") {
        if (value == "unet") model.backbone = Backbone::unet;
        else if (value == "unetpp") model.backbone = Backbone::unetpp;
        else throw ContractViolation("config: unknown backbone '" + value + "'");
    } else if (key == "with_mhex") {
        model.with_mhex = parse_bool(key, value);
    } else if (key == "in_channels") {
        model.in_channels = parse_int(key, value);
    } else if (key == "class_count") {
        model.class_count = parse_int(key, value);
    } else if (key == "base_width") {
        model.base_width = parse_int(key, value);
    } else if (key == "depth") {
        model.depth = parse_int(key, value);
    } else if (key == "mhex_hidden") {
        model.mhex_hidden = parse_int(key, value);
    } else if (key == "seed") {
        set_seed(static_cast<uint64_t>(parse_int(key, value)));
    } else if (key == "max_epochs") {
        train.max_epochs = parse_int(key, value);
    } else if (key == "early_stop_patience") {
        train.early_stop_patience = parse_int(key, value);
    } else if (key == "lr_reduce_patience") {
        train.lr_reduce_patience = parse_int(key, value);
    } else if (key == "lr") {
        train.lr = parse_real(key, value);
    } else if (key == "lr_factor") {
        train.lr_factor = parse_real(key, value);
    } else if (key == "batch_size") {
        train.batch_size = parse_int(key, value);
    } else if (key == "loss") {
        if (value == "ce") train.loss_kind = LossKind::ce;
        else if (value == "dice") train.loss_kind = LossKind::dice;
        else throw ContractViolation("config: unknown loss '" + value + "'");
    } else if (key == "image_size") {
        data.image_size = parse_int(key, value);
    } else if (key == "sample_count") {
        data.sample_count = parse_int(key, value);
    } else if (key == "shape_kinds") {
        data.shape_kinds = parse_shape_kinds(value);
    } else if (key == "noise_std") {
        data.noise_std = parse_real(key, value);
    } else if (key == "boundary_blur_px") {
        data.boundary_blur_px = parse_real(key, value);
    } else if (key == "epsilon") {
        uncert.epsilon = parse_real(key, value);
    } else if (key == "normalize") {
        uncert.normalize = parse_bool(key, value);
    } else if (key == "stride") {
        uncert.stride = parse_int(key, value);
    } else if (key == "folds") {
        folds = parse_int(key, value);
    } else if (key == "val_fold") {
        val_fold = parse_int(key, value);
    } else {
        throw ContractViolation("config: unknown key '" + key + "'");
    }
}

std::string RunConfig::serialize() const {
    std::string out;
    auto kv = [&out](const std::string& k, const std::string& v) {
        out += k;
        out += " = ";
        out += v;
        out += '\n';
    };
    kv("backbone", model.backbone == Backbone::unet ? "unet" : "unetpp");
    kv("with_mhex", model.with_mhex ? "true" : "false");
    kv("in_channels", std::to_string(model.in_channels));
    kv("class_count", std::to_string(model.class_count));
    kv("base_width", std::to_string(model.base_width));
    kv("depth", std::to_string(model.depth));
    kv("mhex_hidden", std::to_string(model.mhex_hidden));
    kv("seed", std::to_string(model.seed));
    kv("max_epochs", std::to_string(train.max_epochs));
    kv("early_stop_patience", std::to_string(train.early_stop_patience));
    kv("lr_reduce_patience", std::to_string(train.lr_reduce_patience));
    kv("lr", fmt_double(train.lr));
    kv("lr_factor", fmt_double(train.lr_factor));
    kv("batch_size", std::to_string(train.batch_size));
    kv("loss", train.loss_kind == LossKind::ce ? "ce" : "dice");
    kv("image_size", std::to_string(data.image_size));
    kv("sample_count", std::to_string(data.sample_count));
    kv("shape_kinds", shape_kinds_to_string(data.shape_kinds));
    kv("noise_std", fmt_double(data.noise_std));
    kv("boundary_blur_px", fmt_double(data.boundary_blur_px));
    kv("epsilon", fmt_double(uncert.epsilon));
    kv("normalize", uncert.normalize ? "true" : "false");
    kv("stride", std::to_string(uncert.stride));
    kv("folds", std::to_string(folds));
    kv("val_fold", std::to_string(val_fold));
    return out;
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ContractViolation("config: line " + std::to_string(lineno) +
                                    " is not 'key = value'");
        }
        cfg.apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    return parse_run_config(read_text_file(path));
}

} // namespace eunet
