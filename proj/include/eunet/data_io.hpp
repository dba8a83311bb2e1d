#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "eunet/models.hpp"
#include "eunet/pixel_map.hpp"
#include "eunet/tensor.hpp"

namespace eunet {

enum class ShapeKind { disk, ellipse, blob };

struct SyntheticConfig {
    int image_size = 64;
    int sample_count = 32;
    std::vector<ShapeKind> shape_kinds = {ShapeKind::disk, ShapeKind::ellipse,
                                          ShapeKind::blob};
    double noise_std = 0.15;
    double boundary_blur_px = 1.5;
    uint64_t seed = 0;

    void validate() const;
};

struct Sample {
    Tensor image;  // [1,H,W], values in [0,1]
    Tensor mask;   // [H,W], class ids (0 background, 1 foreground)
    int id = 0;
};

// 1-3 bright shapes on a dark background; crisp geometry for the mask, then
// Gaussian boundary blur and pixel noise on the image. The blur makes a band
// of genuinely ambiguous border pixels whose width is known from the config.
std::vector<Sample> generate_synthetic(const SyntheticConfig& cfg);

// crisp rasterizers (pixel-center-inside rule); exposed for oracle tests
void rasterize_disk(std::vector<uint8_t>& mask, int size, double cx, double cy, double r);
void rasterize_ellipse(std::vector<uint8_t>& mask, int size, double cx, double cy,
                       double a, double b, double theta);
void rasterize_blob(std::vector<uint8_t>& mask, int size, double cx, double cy,
                    double r0, double a1, double p1, double a2, double p2);

// pixels within euclidean distance `radius` of any mask boundary pixel
std::vector<uint8_t> boundary_band(const Tensor& mask, double radius);

// --- PGM (binary P5, maxval 255) ---
// write quantizes round-half-up to the 1/255 grid; values must be in [0,1]
void write_pgm(const PixelMap& m, const std::string& path);
PixelMap read_pgm(const std::string& path);

// --- raw map CSV (header i,j,value) ---
void write_map_csv(const PixelMap& m, const std::string& path);
PixelMap read_map_csv(const std::string& path);

// --- named-tensor container (magic "EUNC", version 1, little-endian) ---
struct NamedTensor {
    std::string name;
    Tensor value;
};
void save_tensors(const std::vector<NamedTensor>& tensors, const std::string& path);
std::vector<NamedTensor> load_tensors(const std::string& path);

// checkpoints: the model config rides along as a fixed-layout meta tensor
void save_checkpoint(const ModelGraph& model, const std::string& path);
ModelGraph load_checkpoint(const std::string& path);

// --- cross-validation folds ---
struct FoldPlan {
    int k = 5;
    uint64_t seed = 0;
    std::vector<int> ids;   // every sample id, covered exactly once
    std::vector<int> fold;  // fold[i] is the fold of ids[i]

    std::vector<int> fold_ids(int f) const;
    std::vector<int> other_ids(int f) const;
};

// seeded shuffle then round-robin; fold sizes differ by at most one
FoldPlan kfold(const std::vector<int>& ids, int k, uint64_t seed);

// --- small CSV helpers shared by the CLI and harness ---
std::string fmt_double(double v);  // shortest round-trip-stable form used in CSVs
void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

} // namespace eunet
