#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtx/common.hpp"

namespace dtx {

constexpr uint16_t kIgnoreIndex = 65535;

// Per-pixel class indices at image resolution plus the class-name list
// that produced them.
struct SegmentationMap {
    std::vector<uint16_t> labels;  // row-major H x W
    int height = 0;
    int width = 0;
    std::vector<std::string> class_names;
    uint16_t ignore_index = kIgnoreIndex;

    uint16_t at(int y, int x) const { return labels[static_cast<size_t>(y) * width + x]; }
    uint16_t& at(int y, int x) { return labels[static_cast<size_t>(y) * width + x]; }
};

// DTXS binary labels + JSON sidecar (<path>.json) with class names.
void write_segmentation(const SegmentationMap& m, const std::string& path);
SegmentationMap read_segmentation(const std::string& path);

// PPM render with a fixed 16-color cycling palette, for eyeballing.
void write_segmentation_ppm(const SegmentationMap& m, const std::string& path);

}  // namespace dtx
