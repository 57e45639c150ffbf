#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dtx/core.hpp"
#include "dtx/segmap.hpp"

namespace dtx {

struct Raster {
    std::vector<uint8_t> pixels;  // H x W x 3, row-major
    int height = 0;
    int width = 0;

    Raster() = default;
    Raster(int h, int w) : pixels(static_cast<size_t>(h) * w * 3, 0), height(h), width(w) {}

    uint8_t* px(int y, int x) { return pixels.data() + (static_cast<size_t>(y) * width + x) * 3; }
    const uint8_t* px(int y, int x) const {
        return pixels.data() + (static_cast<size_t>(y) * width + x) * 3;
    }
};

void write_raster(const Raster& r, const std::string& path);  // DTXR
Raster read_raster(const std::string& path);

class VisionEncoder {
public:
    virtual ~VisionEncoder() = default;
    virtual FeatureGrid encode(const Raster& r) const = 0;
    virtual int patch_size() const = 0;
    virtual int dim() const = 0;
};

// Deterministic stand-in for the frozen backbone: each patch maps to a
// pseudo-random unit anchor keyed by its quantized dominant color (4x4x4
// bins), plus a small positional jitter; cls is the normalized patch mean.
class SyntheticEncoder : public VisionEncoder {
public:
    SyntheticEncoder(int dim, uint64_t seed, int patch = 14, double jitter = 0.05);
    FeatureGrid encode(const Raster& r) const override;
    int patch_size() const override { return patch_; }
    int dim() const override { return dim_; }

    // unit anchor for a color bin index in [0, 64)
    Vec anchor(int bin) const;
    static int color_bin(uint8_t r, uint8_t g, uint8_t b);

private:
    int dim_;
    uint64_t seed_;
    int patch_;
    double jitter_;
};

// Reads precomputed grids from DTXF files; dim checked against config.
FeatureGrid file_encode(const std::string& path, int expected_dim = 0);

struct NamedColor {
    std::string name;
    uint8_t r, g, b;
};

// Palette of 4x4x4-bin-distinct colors; index 0 is the background.
const std::vector<NamedColor>& shapes_palette();

struct ShapesImage {
    Raster raster;
    SegmentationMap mask;     // labels index into the corpus class list
    std::string caption;      // "a photo of <c1> and <c2> ..." by first appearance
    std::vector<int> present; // class indices present, first-appearance order
};

struct ShapesOptions {
    int image_size = 112;        // multiple of patch size
    int patch = 14;
    int min_rects = 1;
    int max_rects = 3;
    int min_side_patches = 2;    // rectangle sides, in patches
    int max_side_patches = 5;
    bool unique_class_sets = false;  // reject repeated color combinations
};

// classes[0] is the background class; rectangles use classes[1..].
std::vector<ShapesImage> make_shapes_dataset(int n_images,
                                             const std::vector<std::string>& classes,
                                             uint64_t seed,
                                             const ShapesOptions& opt = {});

}  // namespace dtx
