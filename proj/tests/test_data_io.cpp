#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "eunet/data_io.hpp"
#include "oracles.hpp"

using namespace eunet;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
    static int counter = 0;
    fs::path dir = fs::temp_directory_path() / "eunet_io_tests";
    fs::create_directories(dir);
    return (dir / (std::to_string(counter++) + "_" + name)).string();
}

} // namespace

TEST_CASE("disk rasterization matches the integer-counting oracle") {
    const int S = 64;
    const double cx = 32.0, cy = 32.0, r = 8.0;
    std::vector<uint8_t> mask(static_cast<size_t>(S) * S, 0);
    rasterize_disk(mask, S, cx, cy, r);
    int64_t got = 0;
    for (uint8_t v : mask) got += v;

    int64_t want = 0;
    for (int i = 0; i < S; ++i) {
        for (int j = 0; j < S; ++j) {
            if ((i - cy) * (i - cy) + (j - cx) * (j - cx) <= r * r) ++want;
        }
    }
    CHECK(got == want);
    CHECK(got > 0);
}

TEST_CASE("synthetic generation is deterministic and clamped") {
    SyntheticConfig cfg;
    cfg.image_size = 32;
    cfg.sample_count = 4;
    cfg.seed = 9;
    std::vector<Sample> a = generate_synthetic(cfg);
    std::vector<Sample> b = generate_synthetic(cfg);
    REQUIRE(a.size() == 4);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(*a[i].image.data == *b[i].image.data);  // bitwise
        CHECK(*a[i].mask.data == *b[i].mask.data);
        for (int64_t p = 0; p < a[i].image.numel(); ++p) {
            CHECK(a[i].image[p] >= 0.0);
            CHECK(a[i].image[p] <= 1.0);
        }
        for (int64_t p = 0; p < a[i].mask.numel(); ++p) {
            CHECK((a[i].mask[p] == 0.0 || a[i].mask[p] == 1.0));
        }
    }
}

TEST_CASE("noiseless unblurred samples are bimodal with mask-aligned foreground") {
    SyntheticConfig cfg;
    cfg.image_size = 32;
    cfg.sample_count = 6;
    cfg.noise_std = 0.0;
    cfg.boundary_blur_px = 0.0;
    cfg.seed = 3;
    for (const Sample& s : generate_synthetic(cfg)) {
        bool any_fg = false;
        for (int64_t p = 0; p < s.mask.numel(); ++p) {
            if (s.mask[p] == 1.0) {
                any_fg = true;
                CHECK(s.image[p] > 0.5);  // bright shape
            } else {
                CHECK(s.image[p] < 0.5);  // dark background
            }
        }
        CHECK(any_fg);
    }
}

TEST_CASE("boundary band surrounds the mask edge") {
    SyntheticConfig cfg;
    cfg.image_size = 32;
    cfg.sample_count = 1;
    cfg.noise_std = 0.0;
    cfg.seed = 5;
    Sample s = generate_synthetic(cfg)[0];
    std::vector<uint8_t> band = boundary_band(s.mask, 2.0);

    int64_t band_px = 0;
    for (uint8_t v : band) band_px += v;
    CHECK(band_px > 0);
    CHECK(band_px < s.mask.numel());

    // every boundary pixel itself is in the band
    const int W = 32;
    for (int i = 0; i < 32; ++i) {
        for (int j = 0; j < 32; ++j) {
            const double v = s.mask[static_cast<int64_t>(i) * W + j];
            const bool edge =
                (i > 0 && s.mask[static_cast<int64_t>(i - 1) * W + j] != v) ||
                (i + 1 < 32 && s.mask[static_cast<int64_t>(i + 1) * W + j] != v) ||
                (j > 0 && s.mask[static_cast<int64_t>(i) * W + j - 1] != v) ||
                (j + 1 < 32 && s.mask[static_cast<int64_t>(i) * W + j + 1] != v);
            if (edge) CHECK(band[static_cast<size_t>(i) * W + j] == 1);
        }
    }
}

TEST_CASE("pgm quantization: constant 0.5 map becomes byte 128") {
    PixelMap m(2, 2, MapKind::confidence);
    std::fill(m.values.begin(), m.values.end(), 0.5);
    const std::string path = tmp_path("half.pgm");
    write_pgm(m, path);
    std::ifstream f(path, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    REQUIRE(buf.size() == std::string("P5\n2 2\n255\n").size() + 4);
    for (size_t i = buf.size() - 4; i < buf.size(); ++i) {
        CHECK(static_cast<unsigned char>(buf[i]) == 128);
    }
}

TEST_CASE("pgm header layout is exact") {
    PixelMap m(2, 3, MapKind::cam);  // height 2, width 3
    const std::string path = tmp_path("hdr.pgm");
    write_pgm(m, path);
    std::ifstream f(path, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    CHECK(buf.substr(0, 11) == "P5\n3 2\n255\n");
    CHECK(buf.size() == 11 + 6);
}

TEST_CASE("pgm round trip stays within the quantization bound") {
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        Rng rng(seed);
        PixelMap m(4, 5, MapKind::cam);
        for (double& v : m.values) v = rng.uniform(0.0, 1.0);
        const std::string path = tmp_path("rt.pgm");
        write_pgm(m, path);
        PixelMap r = read_pgm(path);
        REQUIRE(r.height == 4);
        REQUIRE(r.width == 5);
        for (size_t i = 0; i < m.size(); ++i) {
            CHECK(std::abs(r.values[i] - m.values[i]) <= 1.0 / 510.0 + 1e-12);
        }
    }
}

TEST_CASE("pgm writer rejects out-of-range values") {
    PixelMap m(2, 2, MapKind::cam);
    m.values[0] = 1.5;
    CHECK_THROWS_AS(write_pgm(m, tmp_path("bad.pgm")), ContractViolation);
}

TEST_CASE("pgm reader reports the byte offset of malformed headers") {
    const std::string path = tmp_path("broken.pgm");
    write_text_file(path, "P5\n3 2\n999\n......");
    try {
        read_pgm(path);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("at byte") != std::string::npos);
        CHECK(msg.find("maxval") != std::string::npos);
    }
    write_text_file(path, "P6\n3 2\n255\n......");
    CHECK_THROWS_AS(read_pgm(path), ParseError);
    write_text_file(path, "P5\n3 2\n255\n..");  // truncated pixels
    CHECK_THROWS_AS(read_pgm(path), ParseError);
}

TEST_CASE("map csv round trip") {
    Rng rng(3);
    PixelMap m(3, 4, MapKind::uncertainty);
    for (double& v : m.values) v = rng.uniform(-2.0, 2.0);
    const std::string path = tmp_path("map.csv");
    write_map_csv(m, path);
    PixelMap r = read_map_csv(path);
    REQUIRE(r.height == 3);
    REQUIRE(r.width == 4);
    for (size_t i = 0; i < m.size(); ++i) {
        CHECK(r.values[i] == doctest::Approx(m.values[i]).epsilon(1e-10));
    }
}

TEST_CASE("empty tensor container is exactly 12 bytes") {
    const std::string path = tmp_path("empty.eunc");
    save_tensors({}, path);
    CHECK(fs::file_size(path) == 12);
    CHECK(load_tensors(path).empty());
}

TEST_CASE("tensor container round trip is bit exact") {
    Rng rng(4);
    std::vector<NamedTensor> ts;
    ts.push_back({"alpha", oracle::random_tensor({2, 3}, rng)});
    ts.push_back({"beta/gamma", oracle::random_tensor({4}, rng)});
    const std::string path = tmp_path("pair.eunc");
    save_tensors(ts, path);
    std::vector<NamedTensor> r = load_tensors(path);
    REQUIRE(r.size() == 2);
    CHECK(r[0].name == "alpha");
    CHECK(r[1].name == "beta/gamma");
    CHECK(*r[0].value.data == *ts[0].value.data);
    CHECK(r[1].value.dims == std::vector<int>{4});
}

TEST_CASE("corrupted magic refuses to load") {
    const std::string path = tmp_path("bad_magic.eunc");
    save_tensors({}, path);
    std::string buf = read_text_file(path);
    buf[0] = 'X';
    write_text_file(path, buf);
    CHECK_THROWS_AS(load_tensors(path), ParseError);
}

TEST_CASE("truncated container reports the byte offset") {
    Rng rng(5);
    const std::string path = tmp_path("trunc.eunc");
    save_tensors({{"w", oracle::random_tensor({8}, rng)}}, path);
    std::string buf = read_text_file(path);
    write_text_file(path, buf.substr(0, buf.size() - 11));
    try {
        load_tensors(path);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("at byte") != std::string::npos);
    }
}

TEST_CASE("checkpoint round trip preserves the forward pass bit-exactly") {
    ModelConfig c;
    c.with_mhex = true;
    c.base_width = 4;
    c.depth = 2;
    c.mhex_hidden = 4;
    c.seed = 11;
    ModelGraph m = build_model(c);
    const std::string path = tmp_path("model.eunc");
    save_checkpoint(m, path);
    ModelGraph r = load_checkpoint(path);
    CHECK(r.cfg.with_mhex == c.with_mhex);
    CHECK(r.cfg.depth == c.depth);

    Rng rng(6);
    Tensor img = oracle::random_tensor({1, 1, 8, 8}, rng, 0.0, 1.0);
    Tape t1(false), t2(false);
    Tensor a = forward(m, t1, img).final_logits;
    Tensor b = forward(r, t2, img).final_logits;
    CHECK(*a.data == *b.data);  // bitwise
}

TEST_CASE("kfold sizes, remainder rule, and partition property") {
    std::vector<int> ids10(10);
    for (int i = 0; i < 10; ++i) ids10[static_cast<size_t>(i)] = i;
    FoldPlan p10 = kfold(ids10, 5, 1);
    for (int f = 0; f < 5; ++f) CHECK(p10.fold_ids(f).size() == 2);

    std::vector<int> ids11(11);
    for (int i = 0; i < 11; ++i) ids11[static_cast<size_t>(i)] = i;
    FoldPlan p11 = kfold(ids11, 5, 1);
    std::vector<size_t> sizes;
    for (int f = 0; f < 5; ++f) sizes.push_back(p11.fold_ids(f).size());
    CHECK(sizes == std::vector<size_t>{3, 2, 2, 2, 2});

    // folds partition the id set
    std::set<int> seen;
    for (int f = 0; f < 5; ++f) {
        for (int id : p11.fold_ids(f)) {
            CHECK(seen.insert(id).second);  // pairwise disjoint
        }
    }
    CHECK(seen.size() == 11);

    CHECK_THROWS_AS(kfold({1, 2}, 3, 0), ContractViolation);

    // same seed, same plan
    FoldPlan q = kfold(ids11, 5, 1);
    CHECK(q.ids == p11.ids);
    CHECK(q.fold == p11.fold);
}
