#pragma once

#include <string>
#include <vector>

#include "eunet/common.hpp"

namespace eunet {

enum class MapKind { cam, gradcam, confidence, uncertainty, entropy, variance, mean_prob };

std::string to_string(MapKind k);

// Single-channel 2-D real map. Values are raw; normalized() produces the
// [0,1] min-max rescaling used for export.
struct PixelMap {
    int height = 0;
    int width = 0;
    std::vector<double> values;
    MapKind kind = MapKind::cam;

    PixelMap() = default;
    PixelMap(int h, int w, MapKind k)
        : height(h), width(w), values(static_cast<size_t>(h) * w, 0.0), kind(k) {
        require(h > 0 && w > 0, "PixelMap dims must be positive");
    }

    double& at(int i, int j) { return values[static_cast<size_t>(i) * width + j]; }
    double at(int i, int j) const { return values[static_cast<size_t>(i) * width + j]; }
    size_t size() const { return values.size(); }

    double min() const;
    double max() const;

    // min-max rescaled copy; a constant map collapses to all zeros
    PixelMap normalized() const;
};

} // namespace eunet
