#include "eunet/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "eunet/rng.hpp"

namespace eunet {

void SyntheticConfig::validate() const {
    require(image_size >= 8, "SyntheticConfig: image_size too small");
    require(sample_count >= 1, "SyntheticConfig: sample_count must be >= 1");
    require(!shape_kinds.empty(), "SyntheticConfig: no shape kinds");
    require(noise_std >= 0.0, "SyntheticConfig: noise_std must be >= 0");
    require(boundary_blur_px >= 0.0, "SyntheticConfig: blur must be >= 0");
}

void rasterize_disk(std::vector<uint8_t>& mask, int size, double cx, double cy, double r) {
    for (int i = 0; i < size; ++i) {
        for (int j = 0; j < size; ++j) {
            const double dy = i - cy, dx = j - cx;
            if (dx * dx + dy * dy <= r * r) mask[static_cast<size_t>(i) * size + j] = 1;
        }
    }
}

void rasterize_ellipse(std::vector<uint8_t>& mask, int size, double cx, double cy,
                       double a, double b, double theta) {
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int i = 0; i < size; ++i) {
        for (int j = 0; j < size; ++j) {
            const double dy = i - cy, dx = j - cx;
            const double u = (dx * ct + dy * st) / a;
            const double v = (-dx * st + dy * ct) / b;
            if (u * u + v * v <= 1.0) mask[static_cast<size_t>(i) * size + j] = 1;
        }
    }
}

void rasterize_blob(std::vector<uint8_t>& mask, int size, double cx, double cy,
                    double r0, double a1, double p1, double a2, double p2) {
    for (int i = 0; i < size; ++i) {
        for (int j = 0; j < size; ++j) {
            const double dy = i - cy, dx = j - cx;
            const double d = std::sqrt(dx * dx + dy * dy);
            const double phi = std::atan2(dy, dx);
            const double rb =
                r0 * (1.0 + a1 * std::sin(2.0 * phi + p1) + a2 * std::sin(3.0 * phi + p2));
            if (d <= rb) mask[static_cast<size_t>(i) * size + j] = 1;
        }
    }
}

namespace {

// separable gaussian blur, clamp-to-edge, radius 3 sigma
void gaussian_blur(std::vector<double>& img, int size, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double norm = 0.0;
    for (int t = -radius; t <= radius; ++t) {
        const double v = std::exp(-0.5 * t * t / (sigma * sigma));
        k[static_cast<size_t>(t + radius)] = v;
        norm += v;
    }
    for (double& v : k) v /= norm;

    std::vector<double> tmp(img.size());
    auto clampi = [&](int v) { return std::min(std::max(v, 0), size - 1); };
    for (int i = 0; i < size; ++i) {
        for (int j = 0; j < size; ++j) {
            double acc = 0.0;
            for (int t = -radius; t <= radius; ++t) {
                acc += k[static_cast<size_t>(t + radius)] *
                       img[static_cast<size_t>(i) * size + clampi(j + t)];
            }
            tmp[static_cast<size_t>(i) * size + j] = acc;
        }
    }
    for (int i = 0; i < size; ++i) {
        for (int j = 0; j < size; ++j) {
            double acc = 0.0;
            for (int t = -radius; t <= radius; ++t) {
                acc += k[static_cast<size_t>(t + radius)] *
                       tmp[static_cast<size_t>(clampi(i + t)) * size + j];
            }
            img[static_cast<size_t>(i) * size + j] = acc;
        }
    }
}

} // namespace

std::vector<Sample> generate_synthetic(const SyntheticConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const int S = cfg.image_size;
    const int64_t px = static_cast<int64_t>(S) * S;

    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(cfg.sample_count));
    for (int id = 0; id < cfg.sample_count; ++id) {
        std::vector<uint8_t> mask(static_cast<size_t>(px), 0);
        std::vector<double> img(static_cast<size_t>(px), 0.0);
        const double bg = rng.uniform(0.05, 0.25);
        std::fill(img.begin(), img.end(), bg);

        const int shapes = rng.uniform_int(1, 3);
        for (int s = 0; s < shapes; ++s) {
            const ShapeKind kind = cfg.shape_kinds[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int>(cfg.shape_kinds.size()) - 1))];
            const double fg = rng.uniform(0.65, 0.95);
            std::vector<uint8_t> sm(static_cast<size_t>(px), 0);
            auto center = [&](double margin) {
                const double lo = std::min(margin, S / 2.0 - 1.0);
                return rng.uniform(lo, S - 1.0 - lo);
            };
            if (kind == ShapeKind::disk) {
                const double r = rng.uniform(0.12, 0.22) * S;
                const double cx = center(r + 2.0), cy = center(r + 2.0);
                rasterize_disk(sm, S, cx, cy, r);
            } else if (kind == ShapeKind::ellipse) {
                const double a = rng.uniform(0.12, 0.24) * S;
                const double b = rng.uniform(0.08, 0.18) * S;
                const double theta = rng.uniform(0.0, 3.14159265358979323846);
                const double m = std::max(a, b) + 2.0;
                const double cx = center(m), cy = center(m);
                rasterize_ellipse(sm, S, cx, cy, a, b, theta);
            } else {
                const double r0 = rng.uniform(0.12, 0.20) * S;
                const double a1 = rng.uniform(0.0, 0.3);
                const double p1 = rng.uniform(0.0, 6.283185307179586);
                const double a2 = rng.uniform(0.0, 0.2);
                const double p2 = rng.uniform(0.0, 6.283185307179586);
                const double cx = center(1.5 * r0 + 2.0), cy = center(1.5 * r0 + 2.0);
                rasterize_blob(sm, S, cx, cy, r0, a1, p1, a2, p2);
            }
            for (int64_t p = 0; p < px; ++p) {
                if (sm[static_cast<size_t>(p)]) {
                    mask[static_cast<size_t>(p)] = 1;
                    img[static_cast<size_t>(p)] = fg;
                }
            }
        }

        gaussian_blur(img, S, cfg.boundary_blur_px);
        if (cfg.noise_std > 0.0) {
            for (int64_t p = 0; p < px; ++p) {
                img[static_cast<size_t>(p)] += cfg.noise_std * rng.normal();
            }
        }
        for (double& v : img) v = std::min(1.0, std::max(0.0, v));

        Sample smp;
        smp.id = id;
        smp.image = Tensor::from({1, S, S}, std::move(img));
        smp.mask = Tensor::zeros({S, S});
        for (int64_t p = 0; p < px; ++p) {
            smp.mask[p] = static_cast<double>(mask[static_cast<size_t>(p)]);
        }
        out.push_back(std::move(smp));
    }
    return out;
}

std::vector<uint8_t> boundary_band(const Tensor& mask, double radius) {
    require(mask.rank() == 2, "boundary_band: mask must be [H,W]");
    const int H = mask.dim(0), W = mask.dim(1);
    std::vector<std::pair<int, int>> boundary;
    auto at = [&](int i, int j) { return mask[static_cast<int64_t>(i) * W + j]; };
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            const double v = at(i, j);
            const bool edge = (i > 0 && at(i - 1, j) != v) || (i + 1 < H && at(i + 1, j) != v) ||
                              (j > 0 && at(i, j - 1) != v) || (j + 1 < W && at(i, j + 1) != v);
            if (edge) boundary.emplace_back(i, j);
        }
    }
    std::vector<uint8_t> band(static_cast<size_t>(H) * W, 0);
    const double r2 = radius * radius;
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            for (const auto& [bi, bj] : boundary) {
                const double d2 = static_cast<double>((i - bi) * (i - bi) + (j - bj) * (j - bj));
                if (d2 <= r2) {
                    band[static_cast<size_t>(i) * W + j] = 1;
                    break;
                }
            }
        }
    }
    return band;
}

// --- PGM ------------------------------------------------------------------

void write_pgm(const PixelMap& m, const std::string& path) {
    for (double v : m.values) {
        require(v >= 0.0 && v <= 1.0, "write_pgm: values must be in [0,1]");
    }
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "write_pgm: cannot open " + path);
    f << "P5\n" << m.width << " " << m.height << "\n255\n";
    std::vector<unsigned char> bytes(m.size());
    for (size_t i = 0; i < m.size(); ++i) {
        bytes[i] = static_cast<unsigned char>(std::floor(m.values[i] * 255.0 + 0.5));
    }
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

namespace {

struct ByteCursor {
    const std::string& buf;
    size_t pos = 0;

    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError(what + " at byte " + std::to_string(pos));
    }
    void skip_space_and_comments() {
        while (pos < buf.size()) {
            const char c = buf[pos];
            if (c == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    }
    int read_int() {
        skip_space_and_comments();
        if (pos >= buf.size() || buf[pos] < '0' || buf[pos] > '9') fail("expected integer");
        long v = 0;
        while (pos < buf.size() && buf[pos] >= '0' && buf[pos] <= '9') {
            v = v * 10 + (buf[pos] - '0');
            if (v > 1 << 24) fail("integer out of range");
            ++pos;
        }
        return static_cast<int>(v);
    }
};

} // namespace

PixelMap read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) throw ParseError("read_pgm: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();

    ByteCursor cur{buf};
    if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '5') cur.fail("missing P5 magic");
    cur.pos = 2;
    const int w = cur.read_int();
    const int h = cur.read_int();
    const int maxval = cur.read_int();
    if (w <= 0 || h <= 0) cur.fail("bad dimensions");
    if (maxval != 255) cur.fail("unsupported maxval (want 255)");
    if (cur.pos >= buf.size()) cur.fail("missing pixel data");
    const char sep = buf[cur.pos];
    if (sep != '\n' && sep != ' ' && sep != '\t' && sep != '\r') {
        cur.fail("expected single whitespace before pixel data");
    }
    ++cur.pos;
    const size_t need = static_cast<size_t>(w) * static_cast<size_t>(h);
    if (buf.size() - cur.pos < need) cur.fail("truncated pixel data");

    PixelMap m(h, w, MapKind::cam);
    for (size_t i = 0; i < need; ++i) {
        m.values[i] = static_cast<unsigned char>(buf[cur.pos + i]) / 255.0;
    }
    return m;
}

// --- raw map CSV ------------------------------------------------------------

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

void write_map_csv(const PixelMap& m, const std::string& path) {
    std::string out = "i,j,value\n";
    for (int i = 0; i < m.height; ++i) {
        for (int j = 0; j < m.width; ++j) {
            out += std::to_string(i);
            out += ',';
            out += std::to_string(j);
            out += ',';
            out += fmt_double(m.at(i, j));
            out += '\n';
        }
    }
    write_text_file(path, out);
}

PixelMap read_map_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f.good()) throw ParseError("read_map_csv: cannot open " + path);
    std::string line;
    std::getline(f, line);
    if (line != "i,j,value" && line != "i,j,value\r") {
        throw ParseError("read_map_csv: bad header in " + path);
    }
    struct Cell { int i, j; double v; };
    std::vector<Cell> cells;
    int maxi = -1, maxj = -1;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        Cell c;
        if (std::sscanf(line.c_str(), "%d,%d,%lf", &c.i, &c.j, &c.v) != 3) {
            throw ParseError("read_map_csv: bad row '" + line + "'");
        }
        maxi = std::max(maxi, c.i);
        maxj = std::max(maxj, c.j);
        cells.push_back(c);
    }
    require(maxi >= 0 && maxj >= 0, "read_map_csv: empty map");
    PixelMap m(maxi + 1, maxj + 1, MapKind::cam);
    for (const Cell& c : cells) m.at(c.i, c.j) = c.v;
    return m;
}

// --- named-tensor container -------------------------------------------------

namespace {

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct BinCursor {
    const std::string& buf;
    size_t pos = 0;

    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError(what + " at byte " + std::to_string(pos));
    }
    uint32_t get_u32() {
        if (buf.size() - pos < 4) fail("truncated u32");
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += 4;
        return v;
    }
    double get_f64() {
        if (buf.size() - pos < 8) fail("truncated f64");
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) {
            bits |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += 8;
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string get_bytes(size_t n) {
        if (buf.size() - pos < n) fail("truncated string");
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

constexpr char kMagic[4] = {'E', 'U', 'N', 'C'};
constexpr uint32_t kVersion = 1;

} // namespace

void save_tensors(const std::vector<NamedTensor>& tensors, const std::string& path) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<uint32_t>(tensors.size()));
    for (const NamedTensor& nt : tensors) {
        put_u32(out, static_cast<uint32_t>(nt.name.size()));
        out += nt.name;
        put_u32(out, static_cast<uint32_t>(nt.value.dims.size()));
        for (int d : nt.value.dims) put_u32(out, static_cast<uint32_t>(d));
        for (int64_t i = 0; i < nt.value.numel(); ++i) put_f64(out, nt.value[i]);
    }
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "save_tensors: cannot open " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

std::vector<NamedTensor> load_tensors(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) throw ParseError("load_tensors: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();

    BinCursor cur{buf};
    const std::string magic = cur.get_bytes(4);
    if (magic != std::string(kMagic, 4)) cur.fail("bad magic (not an EUNC file)");
    const uint32_t version = cur.get_u32();
    if (version != kVersion) {
        cur.fail("unsupported version " + std::to_string(version));
    }
    const uint32_t count = cur.get_u32();
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (uint32_t t = 0; t < count; ++t) {
        NamedTensor nt;
        const uint32_t name_len = cur.get_u32();
        nt.name = cur.get_bytes(name_len);
        const uint32_t rank = cur.get_u32();
        if (rank > 8) cur.fail("implausible tensor rank");
        std::vector<int> dims;
        int64_t n = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            const uint32_t e = cur.get_u32();
            if (e == 0 || e > (1u << 24)) cur.fail("bad tensor extent");
            dims.push_back(static_cast<int>(e));
            n *= e;
        }
        std::vector<double> vals(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) vals[static_cast<size_t>(i)] = cur.get_f64();
        nt.value = Tensor::from(std::move(dims), std::move(vals));
        out.push_back(std::move(nt));
    }
    return out;
}

namespace {

constexpr const char* kConfigTensor = "__model_config__";

} // namespace

void save_checkpoint(const ModelGraph& model, const std::string& path) {
    std::vector<NamedTensor> tensors;
    const ModelConfig& c = model.cfg;
    tensors.push_back({kConfigTensor,
                       Tensor::from({8}, {static_cast<double>(c.backbone == Backbone::unetpp),
                                          static_cast<double>(c.with_mhex),
                                          static_cast<double>(c.in_channels),
                                          static_cast<double>(c.class_count),
                                          static_cast<double>(c.base_width),
                                          static_cast<double>(c.depth),
                                          static_cast<double>(c.mhex_hidden),
                                          static_cast<double>(c.seed)})});
    model.for_each_param([&tensors](const std::string& name, const Tensor& t) {
        tensors.push_back({name, t.clone()});
    });
    save_tensors(tensors, path);
}

ModelGraph load_checkpoint(const std::string& path) {
    std::vector<NamedTensor> tensors = load_tensors(path);
    const NamedTensor* meta = nullptr;
    for (const NamedTensor& nt : tensors) {
        if (nt.name == kConfigTensor) meta = &nt;
    }
    if (!meta || meta->value.numel() != 8) {
        throw ParseError("load_checkpoint: missing model config tensor");
    }
    ModelConfig cfg;
    cfg.backbone = meta->value[0] != 0.0 ? Backbone::unetpp : Backbone::unet;
    cfg.with_mhex = meta->value[1] != 0.0;
    cfg.in_channels = static_cast<int>(meta->value[2]);
    cfg.class_count = static_cast<int>(meta->value[3]);
    cfg.base_width = static_cast<int>(meta->value[4]);
    cfg.depth = static_cast<int>(meta->value[5]);
    cfg.mhex_hidden = static_cast<int>(meta->value[6]);
    cfg.seed = static_cast<uint64_t>(meta->value[7]);

    ModelGraph model = build_model(cfg);
    std::unordered_map<std::string, const NamedTensor*> by_name;
    for (const NamedTensor& nt : tensors) by_name[nt.name] = &nt;
    model.for_each_param([&by_name, &path](const std::string& name, Tensor& t) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw ParseError("load_checkpoint: missing tensor '" + name + "' in " + path);
        }
        require(it->second->value.dims == t.dims,
                "load_checkpoint: shape mismatch for '" + name + "'");
        t = it->second->value.clone();
    });
    return model;
}

// --- folds -------------------------------------------------------------------

std::vector<int> FoldPlan::fold_ids(int f) const {
    std::vector<int> out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (fold[i] == f) out.push_back(ids[i]);
    }
    return out;
}

std::vector<int> FoldPlan::other_ids(int f) const {
    std::vector<int> out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (fold[i] != f) out.push_back(ids[i]);
    }
    return out;
}

FoldPlan kfold(const std::vector<int>& ids, int k, uint64_t seed) {
    require(k >= 1, "kfold: k must be >= 1");
    require(k <= static_cast<int>(ids.size()), "kfold: k exceeds the id count");
    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.ids = ids;
    Rng rng(seed);
    rng.shuffle(plan.ids);
    plan.fold.resize(plan.ids.size());
    for (size_t i = 0; i < plan.ids.size(); ++i) {
        plan.fold[i] = static_cast<int>(i % static_cast<size_t>(k));
    }
    return plan;
}

// --- text helpers -------------------------------------------------------------

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "write_text_file: cannot open " + path);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) throw ParseError("read_text_file: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

} // namespace eunet
